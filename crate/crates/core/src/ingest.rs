//! Per-sample evaluation logs: parsing, validation and the pre/post join.
//!
//! A snapshot is a JSON Lines file, one evaluated item per line:
//!
//! ```text
//! {"model_id":"base","benchmark":"MMLU","subtask":"anatomy","sample_key":"17","k":4,"run_id":"0","correct":1}
//! ```
//!
//! Raw generations are accepted in place of `correct` and scored later by
//! [`apply_extraction`]:
//!
//! ```text
//! {"model_id":"base","benchmark":"MMLU","subtask":"anatomy","sample_key":"17","k":4,"run_id":"0",
//!  "generation":"...\nAnswer: B","options":[{"label":"A","text":"..."},...],"gold":"B"}
//! ```

use crate::extraction::{self, ChoiceOption, ExtractionPolicy, ExtractionReport};
use crate::transition::{Correctness, JoinedSample};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: invalid JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: duplicate record {key}")]
    DuplicateKey { line: usize, key: RecordKey },
    #[error("{benchmark}/{subtask}/{sample_key}: k={pre_k} before but k={post_k} after")]
    KConflict {
        benchmark: String,
        subtask: String,
        sample_key: String,
        pre_k: u32,
        post_k: u32,
    },
    #[error("{0} has a raw generation that was never scored")]
    Unscored(RecordKey),
    #[error("line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: io::Error,
    },
}

/// Uniqueness key of a record within one snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub benchmark: String,
    pub subtask: String,
    pub sample_key: String,
    pub run_id: String,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(benchmark={:?}, subtask={:?}, sample_key={:?}, run_id={:?})",
            self.benchmark, self.subtask, self.sample_key, self.run_id
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Scored(Correctness),
    Raw {
        generation: String,
        options: Vec<ChoiceOption>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub model_id: String,
    pub benchmark: String,
    pub subtask: String,
    pub sample_key: String,
    pub k: u32,
    pub run_id: String,
    pub payload: Payload,
    /// Required for raw generations, optional otherwise.
    pub gold: Option<String>,
}

impl SampleRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            benchmark: self.benchmark.clone(),
            subtask: self.subtask.clone(),
            sample_key: self.sample_key.clone(),
            run_id: self.run_id.clone(),
        }
    }

    pub fn correctness(&self) -> Option<Correctness> {
        match self.payload {
            Payload::Scored(c) => Some(c),
            Payload::Raw { .. } => None,
        }
    }

    /// One JSON object in the snapshot line format.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("model_id".into(), self.model_id.clone().into());
        obj.insert("benchmark".into(), self.benchmark.clone().into());
        obj.insert("subtask".into(), self.subtask.clone().into());
        obj.insert("sample_key".into(), self.sample_key.clone().into());
        obj.insert("k".into(), self.k.into());
        obj.insert("run_id".into(), self.run_id.clone().into());
        match &self.payload {
            Payload::Scored(c) => {
                obj.insert("correct".into(), c.as_u8().into());
            }
            Payload::Raw { generation, options } => {
                obj.insert("generation".into(), generation.clone().into());
                obj.insert(
                    "options".into(),
                    serde_json::to_value(options).expect("options serialize"),
                );
            }
        }
        if let Some(gold) = &self.gold {
            obj.insert("gold".into(), gold.clone().into());
        }
        Value::Object(obj)
    }
}

pub fn write_snapshot<W: Write>(mut out: W, records: &[SampleRecord]) -> io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, &record.to_json())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Result of reading one snapshot: every well-formed record, plus an error
/// for every malformed line.
#[derive(Debug, Default)]
pub struct ParsedSnapshot {
    pub records: Vec<SampleRecord>,
    pub errors: Vec<IngestError>,
}

impl ParsedSnapshot {
    pub fn into_result(self) -> Result<Vec<SampleRecord>, IngestError> {
        match self.errors.into_iter().next() {
            Some(err) => Err(err),
            None => Ok(self.records),
        }
    }
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> IngestError {
    IngestError::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn required_string(obj: &Map<String, Value>, line: usize, field: &str) -> Result<String, IngestError> {
    match obj.get(field) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(schema(line, field, "must not be empty")),
        // Numeric ids are common in evaluation logs.
        Some(Value::Number(n)) if field == "sample_key" || field == "run_id" => Ok(n.to_string()),
        Some(_) => Err(schema(line, field, "expected a string")),
        None => Err(schema(line, field, "missing")),
    }
}

fn parse_correct(value: &Value, line: usize) -> Result<Correctness, IngestError> {
    match value {
        Value::Bool(b) => Ok(Correctness::from(*b)),
        Value::Number(n) => match n.as_u64() {
            Some(0) => Ok(Correctness::Incorrect),
            Some(1) => Ok(Correctness::Correct),
            _ => Err(schema(line, "correct", format!("expected 0 or 1, got {n}"))),
        },
        _ => Err(schema(line, "correct", "expected 0, 1, true or false")),
    }
}

fn parse_record(obj: &Map<String, Value>, line: usize) -> Result<SampleRecord, IngestError> {
    let model_id = required_string(obj, line, "model_id")?;
    let benchmark = required_string(obj, line, "benchmark")?;
    let subtask = required_string(obj, line, "subtask")?;
    let sample_key = required_string(obj, line, "sample_key")?;
    let run_id = required_string(obj, line, "run_id")?;
    let k = match obj.get("k") {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| schema(line, "k", "expected a positive integer"))?,
        None => return Err(schema(line, "k", "missing")),
    };
    if k < 2 {
        return Err(schema(line, "k", format!("option count must be at least 2, got {k}")));
    }
    let k = u32::try_from(k).map_err(|_| schema(line, "k", "too large"))?;
    let gold = match obj.get("gold") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(schema(line, "gold", "expected a string")),
    };

    let payload = match (obj.get("correct"), obj.get("generation")) {
        (Some(_), Some(_)) => {
            return Err(schema(
                line,
                "correct",
                "give either `correct` or `generation`, not both",
            ))
        }
        (Some(c), None) => Payload::Scored(parse_correct(c, line)?),
        (None, Some(Value::String(generation))) => {
            let options: Vec<ChoiceOption> = match obj.get("options") {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| schema(line, "options", format!("expected [{{label, text}}, ...]: {e}")))?,
                None => return Err(schema(line, "options", "required with `generation`")),
            };
            if options.len() != k as usize {
                return Err(schema(line, "options", format!("{} options but k={k}", options.len())));
            }
            let labels: BTreeSet<&str> = options.iter().map(|o| o.label.as_str()).collect();
            if labels.len() != options.len() {
                return Err(schema(line, "options", "option labels must be distinct"));
            }
            match &gold {
                None => return Err(schema(line, "gold", "required with `generation`")),
                Some(g) if !labels.contains(g.as_str()) => {
                    return Err(schema(line, "gold", format!("{g:?} is not an option label")))
                }
                Some(_) => {}
            }
            Payload::Raw {
                generation: generation.clone(),
                options,
            }
        }
        (None, Some(_)) => return Err(schema(line, "generation", "expected a string")),
        (None, None) => return Err(schema(line, "correct", "missing (or give `generation`)")),
    };

    Ok(SampleRecord {
        model_id,
        benchmark,
        subtask,
        sample_key,
        k,
        run_id,
        payload,
        gold,
    })
}

/// Parse a snapshot. Blank lines are skipped; line numbers are 1-based.
///
/// Besides per-line schema checks this enforces unique record keys and a
/// single `k` per (benchmark, subtask).
pub fn parse_snapshot<R: BufRead>(reader: R) -> ParsedSnapshot {
    let mut parsed = ParsedSnapshot::default();
    let mut seen: HashMap<RecordKey, usize> = HashMap::new();
    let mut k_by_task: HashMap<(String, String), (u32, usize)> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = match line {
            Ok(t) => t,
            Err(source) => {
                parsed.errors.push(IngestError::Io { line: line_no, source });
                break;
            }
        };
        if text.trim().is_empty() {
            continue;
        }
        let obj = match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(obj)) => obj,
            Ok(_) => {
                parsed.errors.push(IngestError::Json {
                    line: line_no,
                    message: "expected a JSON object".into(),
                });
                continue;
            }
            Err(e) => {
                parsed.errors.push(IngestError::Json {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let record = match parse_record(&obj, line_no) {
            Ok(r) => r,
            Err(e) => {
                parsed.errors.push(e);
                continue;
            }
        };

        let task = (record.benchmark.clone(), record.subtask.clone());
        if let Some(&(k, first_line)) = k_by_task.get(&task) {
            if k != record.k {
                parsed.errors.push(schema(
                    line_no,
                    "k",
                    format!(
                        "k={} but line {first_line} gave k={k} for {}/{}",
                        record.k, task.0, task.1
                    ),
                ));
                continue;
            }
        } else {
            k_by_task.insert(task, (record.k, line_no));
        }

        let key = record.key();
        if seen.contains_key(&key) {
            parsed.errors.push(IngestError::DuplicateKey { line: line_no, key });
            continue;
        }
        seen.insert(key, line_no);
        parsed.records.push(record);
    }
    parsed
}

pub fn parse_snapshot_str(text: &str) -> ParsedSnapshot {
    parse_snapshot(text.as_bytes())
}

/// Score raw generations with `policy`, leaving pre-scored records as they are.
/// The report covers only the raw records.
pub fn apply_extraction(
    records: Vec<SampleRecord>,
    policy: &ExtractionPolicy,
) -> (Vec<SampleRecord>, ExtractionReport) {
    let mut report = ExtractionReport::default();
    let scored = records
        .into_iter()
        .map(|mut record| {
            if let Payload::Raw { generation, options } = &record.payload {
                let outcome = extraction::extract_from_text(generation, options, policy);
                report.record(&outcome);
                let gold = record.gold.as_deref().unwrap_or_default();
                record.payload = Payload::Scored(extraction::score(&outcome, gold));
            }
            record
        })
        .collect();
    (scored, report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunPairing {
    /// Sorted run ids paired by position: first with first, second with second.
    #[default]
    Positional,
    /// Every pre run with every post run.
    CrossProduct,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KConflictPolicy {
    #[default]
    Error,
    /// Drop conflicting items and count them in the report.
    Skip,
}

/// One stratum: a (benchmark, subtask) under one run pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StratumKey {
    pub benchmark: String,
    pub subtask: String,
    pub pre_run: String,
    pub post_run: String,
}

impl StratumKey {
    pub fn run_pair(&self) -> (&str, &str) {
        (&self.pre_run, &self.post_run)
    }
}

/// Join bookkeeping, summed over run pairs. For every run pair,
/// `matched + pre_only + k_conflicts` equals the number of pre records of
/// that run; records of runs left unpaired count as pre-only (post-only).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinReport {
    pub matched: u64,
    pub pre_only: u64,
    pub post_only: u64,
    pub k_conflicts: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Joined {
    pub strata: BTreeMap<StratumKey, Vec<JoinedSample>>,
    pub report: JoinReport,
}

fn run_ids(records: &[SampleRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.run_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn run_pairs(pre: &[SampleRecord], post: &[SampleRecord], pairing: RunPairing) -> Vec<(String, String)> {
    let pre_runs = run_ids(pre);
    let post_runs = run_ids(post);
    match pairing {
        RunPairing::Positional => pre_runs.into_iter().zip(post_runs).collect(),
        RunPairing::CrossProduct => pre_runs
            .iter()
            .flat_map(|a| post_runs.iter().map(move |b| (a.clone(), b.clone())))
            .collect(),
    }
}

type ItemKey<'a> = (&'a str, &'a str, &'a str);

fn index_by_run(records: &[SampleRecord]) -> Result<HashMap<&str, HashMap<ItemKey<'_>, &SampleRecord>>, IngestError> {
    let mut by_run: HashMap<&str, HashMap<ItemKey<'_>, &SampleRecord>> = HashMap::new();
    for r in records {
        if r.correctness().is_none() {
            return Err(IngestError::Unscored(r.key()));
        }
        by_run
            .entry(r.run_id.as_str())
            .or_default()
            .insert((r.benchmark.as_str(), r.subtask.as_str(), r.sample_key.as_str()), r);
    }
    Ok(by_run)
}

/// Join two scored snapshots into per-stratum paired samples.
///
/// Samples within each stratum come out ordered by `sample_key`.
pub fn join_snapshots(
    pre: &[SampleRecord],
    post: &[SampleRecord],
    pairing: RunPairing,
    on_conflict: KConflictPolicy,
) -> Result<Joined, IngestError> {
    let pre_by_run = index_by_run(pre)?;
    let post_by_run = index_by_run(post)?;
    let pairs = run_pairs(pre, post, pairing);

    let mut joined = Joined::default();
    let empty = HashMap::new();
    for (pre_run, post_run) in &pairs {
        let pre_items = pre_by_run.get(pre_run.as_str()).unwrap_or(&empty);
        let post_items = post_by_run.get(post_run.as_str()).unwrap_or(&empty);
        for (item, a) in pre_items {
            let Some(b) = post_items.get(item) else {
                joined.report.pre_only += 1;
                continue;
            };
            if a.k != b.k {
                match on_conflict {
                    KConflictPolicy::Error => {
                        return Err(IngestError::KConflict {
                            benchmark: a.benchmark.clone(),
                            subtask: a.subtask.clone(),
                            sample_key: a.sample_key.clone(),
                            pre_k: a.k,
                            post_k: b.k,
                        })
                    }
                    KConflictPolicy::Skip => {
                        joined.report.k_conflicts += 1;
                        continue;
                    }
                }
            }
            joined.report.matched += 1;
            let key = StratumKey {
                benchmark: a.benchmark.clone(),
                subtask: a.subtask.clone(),
                pre_run: pre_run.clone(),
                post_run: post_run.clone(),
            };
            joined.strata.entry(key).or_default().push(JoinedSample::new(
                a.sample_key.clone(),
                a.correctness().expect("indexed records are scored"),
                b.correctness().expect("indexed records are scored"),
                a.k,
            ));
        }
        joined.report.post_only += post_items.keys().filter(|item| !pre_items.contains_key(*item)).count() as u64;
    }

    // Records whose run found no partner.
    let paired_pre: BTreeSet<&str> = pairs.iter().map(|(a, _)| a.as_str()).collect();
    let paired_post: BTreeSet<&str> = pairs.iter().map(|(_, b)| b.as_str()).collect();
    joined.report.pre_only += pre.iter().filter(|r| !paired_pre.contains(r.run_id.as_str())).count() as u64;
    joined.report.post_only += post.iter().filter(|r| !paired_post.contains(r.run_id.as_str())).count() as u64;

    for samples in joined.strata.values_mut() {
        samples.sort_by(|x, y| x.sample_key.cmp(&y.sample_key));
    }
    Ok(joined)
}
