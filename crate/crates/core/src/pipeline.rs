//! End-to-end computation: snapshot files in, results document and tables out.
//!
//! A run is described by a [`RunManifest`] (TOML):
//!
//! ```toml
//! taxonomy = "taxonomy.toml"      # optional, default taxonomy otherwise
//! run_pairing = "positional"      # or "cross-product"
//! on_k_conflict = "error"         # or "skip"
//!
//! [extraction]
//! tier = "fallback"
//!
//! [uncertainty]
//! mode = "auto"                   # "multi-run", "bootstrap"
//! resamples = 1000
//! seed = 0
//!
//! [[comparisons]]
//! name = "Coder (7B)"
//! pre = ["logs/base.jsonl"]
//! post = ["logs/coder.jsonl"]
//! pre_is_base = true
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use crate::extraction::{ExtractionPolicy, ExtractionReport};
use crate::ingest::{self, IngestError, JoinReport, KConflictPolicy, RunPairing, SampleRecord, StratumKey};
use crate::report::{ReportCell, Table};
use crate::taxonomy::{
    self, CategoryMetrics, ComparisonContext, StratumStats, TaxonomyConfig, TaxonomyError, Weighting,
};
use crate::transition::{tally, JoinedSample, MetricBundle, TransitionError};
use crate::uncertainty::{self, UncertaintyError, UncertaintyMode, UncertaintySpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
    #[error("{path}: {count} malformed line(s), first: {first}")]
    Malformed {
        path: PathBuf,
        count: usize,
        first: Box<IngestError>,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("comparison {comparison:?}: {source}")]
    Join {
        comparison: String,
        #[source]
        source: Box<IngestError>,
    },
    #[error("comparison {comparison:?}: no item appears in both snapshots")]
    NoStrata { comparison: String },
    #[error("comparison {comparison:?}: {source}")]
    Taxonomy {
        comparison: String,
        #[source]
        source: TaxonomyError,
    },
    #[error("comparison {comparison:?}, row {row:?}: {source}")]
    Uncertainty {
        comparison: String,
        row: String,
        #[source]
        source: UncertaintyError,
    },
    #[error("comparison {comparison:?}: {source}")]
    Metrics {
        comparison: String,
        #[source]
        source: TransitionError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub name: String,
    pub pre: Vec<PathBuf>,
    pub post: Vec<PathBuf>,
    #[serde(default)]
    pub pre_is_base: bool,
    #[serde(default)]
    pub post_is_base: bool,
}

impl Comparison {
    pub fn context(&self) -> ComparisonContext {
        ComparisonContext {
            pre_is_base: self.pre_is_base,
            post_is_base: self.post_is_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    /// Category for (benchmark, subtask) pairs no rule matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_category: Option<String>,
    /// Overrides the taxonomy's weighting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighting: Option<Weighting>,
    #[serde(default)]
    pub run_pairing: RunPairing,
    #[serde(default)]
    pub on_k_conflict: KConflictPolicy,
    #[serde(default)]
    pub extraction: ExtractionPolicy,
    #[serde(default)]
    pub uncertainty: UncertaintySpec,
    pub comparisons: Vec<Comparison>,
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let manifest: RunManifest = toml::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest = Self::from_toml(&text)?;
        Ok(manifest.resolve_paths(path.parent().unwrap_or(Path::new("."))))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.comparisons.is_empty() {
            return Err(PipelineError::Manifest("no comparisons".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.comparisons {
            if !names.insert(&c.name) {
                return Err(PipelineError::Manifest(format!("comparison name {:?} repeats", c.name)));
            }
            if c.pre.is_empty() || c.post.is_empty() {
                return Err(PipelineError::Manifest(format!(
                    "comparison {:?} needs pre and post files",
                    c.name
                )));
            }
        }
        UncertaintySpec::new(self.uncertainty.mode, self.uncertainty.resamples, self.uncertainty.seed)
            .map_err(|e| PipelineError::Manifest(e.to_string()))?;
        Ok(())
    }

    /// Make relative paths relative to `base`.
    pub fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(t) = self.taxonomy.as_mut() {
            fix(t);
        }
        for c in &mut self.comparisons {
            c.pre.iter_mut().chain(c.post.iter_mut()).for_each(fix);
        }
        self
    }

    pub fn taxonomy_config(&self) -> Result<TaxonomyConfig, PipelineError> {
        let mut config = match &self.taxonomy {
            None => TaxonomyConfig::default(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
                    path: path.clone(),
                    source,
                })?;
                TaxonomyConfig::from_toml(&text)
                    .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(d) = &self.default_category {
            config = config.with_default_category(d.clone());
        }
        if let Some(w) = self.weighting {
            config = config.with_weighting(w);
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumResult {
    pub benchmark: String,
    pub subtask: String,
    pub pre_run: String,
    pub post_run: String,
    pub category: String,
    pub k: u32,
    pub counts: crate::transition::TransitionCounts,
    pub bundle: MetricBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    #[serde(flatten)]
    pub metrics: CategoryMetrics,
    pub std: MetricBundle,
}

impl RowResult {
    pub fn forgetting_cell(&self) -> ReportCell {
        ReportCell {
            value: self.metrics.bundle.f_true,
            std: self.std.f_true,
            ceiling: self.metrics.bundle.f_max,
        }
    }

    pub fn backward_transfer_cell(&self) -> ReportCell {
        ReportCell {
            value: self.metrics.bundle.bt_true,
            std: self.std.bt_true,
            ceiling: self.metrics.bundle.bt_max,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub pre: ExtractionReport,
    pub post: ExtractionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub name: String,
    pub pre_models: Vec<String>,
    pub post_models: Vec<String>,
    pub context: ComparisonContext,
    pub run_pairs: Vec<(String, String)>,
    pub uncertainty_mode: UncertaintyMode,
    pub join: JoinReport,
    pub extraction: ExtractionSummary,
    pub excluded_strata: usize,
    /// Strata whose adjusted metrics exceed their ceilings.
    pub ceiling_violations: usize,
    pub strata: Vec<StratumResult>,
    pub categories: Vec<RowResult>,
    pub total: RowResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub manifest: RunManifest,
    pub taxonomy: TaxonomyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub config: ConfigEcho,
    pub comparisons: Vec<ComparisonResult>,
}

fn read_snapshot(path: &Path) -> Result<Vec<SampleRecord>, PipelineError> {
    let file = fs::File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed = ingest::parse_snapshot(BufReader::new(file));
    let count = parsed.errors.len();
    match parsed.errors.into_iter().next() {
        Some(first) => Err(PipelineError::Malformed {
            path: path.to_path_buf(),
            count,
            first: Box::new(first),
        }),
        None => Ok(parsed.records),
    }
}

/// Read files in parallel and concatenate, rejecting keys repeated across files.
fn read_snapshots(paths: &[PathBuf]) -> Result<Vec<SampleRecord>, PipelineError> {
    let parts = paths
        .par_iter()
        .map(|p| read_snapshot(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = BTreeSet::new();
    let mut all = Vec::new();
    for (records, path) in parts.into_iter().zip(paths) {
        for r in records {
            if !seen.insert(r.key()) {
                return Err(PipelineError::Parse {
                    path: path.clone(),
                    source: Box::new(IngestError::DuplicateKey { line: 0, key: r.key() }),
                });
            }
            all.push(r);
        }
    }
    Ok(all)
}

fn model_ids(records: &[SampleRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.model_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn stats_of(
    strata: &BTreeMap<StratumKey, Vec<JoinedSample>>,
) -> Result<BTreeMap<StratumKey, StratumStats>, TransitionError> {
    strata
        .iter()
        .map(|(key, samples)| {
            let counts = tally(samples)?;
            let k = samples.first().map(|s| s.k).ok_or(TransitionError::EmptyStratum)?;
            Ok((key.clone(), StratumStats { counts, k }))
        })
        .collect()
}

fn row_std(
    name: &str,
    members: &[(&StratumKey, &Vec<JoinedSample>)],
    mode: UncertaintyMode,
    config: &TaxonomyConfig,
    spec: &UncertaintySpec,
    row_index: u64,
) -> Result<MetricBundle, UncertaintyError> {
    match mode {
        UncertaintyMode::MultiRun => {
            let mut per_run: BTreeMap<(&str, &str), Vec<StratumStats>> = BTreeMap::new();
            for (key, samples) in members {
                let stats = StratumStats {
                    counts: tally(samples)?,
                    k: samples.first().map(|s| s.k).ok_or(TransitionError::EmptyStratum)?,
                };
                per_run.entry(key.run_pair()).or_default().push(stats);
            }
            let bundles = per_run
                .values()
                .map(|stats| taxonomy::combine(name, stats, config.weighting()).map(|r| r.bundle))
                .collect::<Result<Vec<_>, _>>()?;
            uncertainty::multirun_std(&bundles)
        }
        _ => {
            let slices: Vec<&[JoinedSample]> = members.iter().map(|(_, s)| s.as_slice()).collect();
            let row_spec = UncertaintySpec {
                seed: spec.seed.wrapping_add(row_index),
                ..*spec
            };
            uncertainty::bootstrap_std_strata(&slices, config.weighting(), &row_spec)
        }
    }
}

/// Run one comparison over already-parsed snapshots.
pub fn compute_comparison(
    comparison: &Comparison,
    pre: Vec<SampleRecord>,
    post: Vec<SampleRecord>,
    manifest: &RunManifest,
    config: &TaxonomyConfig,
) -> Result<ComparisonResult, PipelineError> {
    let name = comparison.name.clone();
    let pre_models = model_ids(&pre);
    let post_models = model_ids(&post);
    let (pre, pre_report) = ingest::apply_extraction(pre, &manifest.extraction);
    let (post, post_report) = ingest::apply_extraction(post, &manifest.extraction);

    let joined =
        ingest::join_snapshots(&pre, &post, manifest.run_pairing, manifest.on_k_conflict).map_err(|source| {
            PipelineError::Join {
                comparison: name.clone(),
                source: Box::new(source),
            }
        })?;
    let before = joined.strata.len();
    let strata = config.apply_exclusions(joined.strata, &comparison.context());
    let excluded_strata = before - strata.len();
    if strata.is_empty() {
        return Err(PipelineError::NoStrata { comparison: name });
    }

    let taxonomy_err = |source| PipelineError::Taxonomy {
        comparison: name.clone(),
        source,
    };
    let metrics_err = |source| PipelineError::Metrics {
        comparison: name.clone(),
        source,
    };
    let stats = stats_of(&strata).map_err(metrics_err)?;
    let aggregate = taxonomy::aggregate(&stats, config).map_err(taxonomy_err)?;

    let run_pairs: BTreeSet<(String, String)> =
        strata.keys().map(|k| (k.pre_run.clone(), k.post_run.clone())).collect();
    let mode = manifest.uncertainty.resolve(run_pairs.len());

    let mut by_category: BTreeMap<&str, Vec<(&StratumKey, &Vec<JoinedSample>)>> = BTreeMap::new();
    let mut strata_results = Vec::with_capacity(stats.len());
    for (key, samples) in &strata {
        let category = config
            .assign_category(&key.benchmark, &key.subtask)
            .map_err(taxonomy_err)?;
        by_category.entry(category).or_default().push((key, samples));
        let s = &stats[key];
        strata_results.push(StratumResult {
            benchmark: key.benchmark.clone(),
            subtask: key.subtask.clone(),
            pre_run: key.pre_run.clone(),
            post_run: key.post_run.clone(),
            category: category.to_string(),
            k: s.k,
            counts: s.counts,
            bundle: s.bundle().map_err(metrics_err)?,
        });
    }
    let ceiling_violations = strata_results.iter().filter(|s| s.bundle.exceeds_ceiling()).count();

    let with_std = |metrics: CategoryMetrics, members: &[(&StratumKey, &Vec<JoinedSample>)], row_index: u64| {
        let std = row_std(
            &metrics.category,
            members,
            mode,
            config,
            &manifest.uncertainty,
            row_index,
        )
        .map_err(|source| PipelineError::Uncertainty {
            comparison: name.clone(),
            row: metrics.category.clone(),
            source,
        })?;
        Ok::<_, PipelineError>(RowResult { metrics, std })
    };
    let mut categories = Vec::with_capacity(aggregate.categories.len());
    for (i, metrics) in aggregate.categories.into_iter().enumerate() {
        let members = by_category.get(metrics.category.as_str()).cloned().unwrap_or_default();
        categories.push(with_std(metrics, &members, i as u64)?);
    }
    let all: Vec<(&StratumKey, &Vec<JoinedSample>)> = strata.iter().collect();
    let total = with_std(aggregate.total, &all, categories.len() as u64)?;

    Ok(ComparisonResult {
        name,
        pre_models,
        post_models,
        context: comparison.context(),
        run_pairs: run_pairs.into_iter().collect(),
        uncertainty_mode: mode,
        join: joined.report,
        extraction: ExtractionSummary {
            pre: pre_report,
            post: post_report,
        },
        excluded_strata,
        ceiling_violations,
        strata: strata_results,
        categories,
        total,
    })
}

pub fn compute(manifest: &RunManifest) -> Result<RunResults, PipelineError> {
    manifest.validate()?;
    let config = manifest.taxonomy_config()?;
    let mut comparisons = Vec::with_capacity(manifest.comparisons.len());
    for comparison in &manifest.comparisons {
        let pre = read_snapshots(&comparison.pre)?;
        let post = read_snapshots(&comparison.post)?;
        comparisons.push(compute_comparison(comparison, pre, post, manifest, &config)?);
    }
    Ok(RunResults {
        config: ConfigEcho {
            manifest: manifest.clone(),
            taxonomy: config,
        },
        comparisons,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Forgetting,
    BackwardTransfer,
}

impl RunResults {
    /// Rows follow the taxonomy's category order, then the total.
    pub fn table(&self, kind: TableKind) -> Table {
        let title = match kind {
            TableKind::Forgetting => "Forgetting: F_true ±std (F_max), %",
            TableKind::BackwardTransfer => "Backward transfer: BT_true ±std (BT_max), %",
        };
        let cell = |row: &RowResult| match kind {
            TableKind::Forgetting => row.forgetting_cell(),
            TableKind::BackwardTransfer => row.backward_transfer_cell(),
        };
        let present: BTreeSet<&str> = self
            .comparisons
            .iter()
            .flat_map(|c| c.categories.iter().map(|r| r.metrics.category.as_str()))
            .collect();
        let mut rows: Vec<(String, Vec<Option<ReportCell>>)> = self
            .config
            .taxonomy
            .categories()
            .iter()
            .filter(|name| present.contains(name.as_str()))
            .map(|name| {
                let cells = self
                    .comparisons
                    .iter()
                    .map(|c| c.categories.iter().find(|r| &r.metrics.category == name).map(cell))
                    .collect();
                (name.clone(), cells)
            })
            .collect();
        rows.push((
            taxonomy::TOTAL_ROW.to_string(),
            self.comparisons.iter().map(|c| Some(cell(&c.total))).collect(),
        ));
        Table {
            title: title.to_string(),
            columns: self.comparisons.iter().map(|c| c.name.clone()).collect(),
            rows,
        }
    }

    /// Plot-ready series: one row per (comparison, category), total included.
    pub fn radar_rows(&self) -> Vec<RadarRow> {
        self.comparisons
            .iter()
            .flat_map(|c| {
                c.categories.iter().chain([&c.total]).map(|r| RadarRow {
                    comparison: c.name.clone(),
                    category: r.metrics.category.clone(),
                    f_true: r.metrics.bundle.f_true,
                    bt_true: r.metrics.bundle.bt_true,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("results serialize");
        text.push('\n');
        text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarRow {
    pub comparison: String,
    pub category: String,
    pub f_true: f64,
    pub bt_true: f64,
}

pub const RESULTS_FILE: &str = "results.json";
pub const FORGETTING_MD: &str = "forgetting.md";
pub const BACKWARD_TRANSFER_MD: &str = "backward_transfer.md";
pub const FORGETTING_TXT: &str = "forgetting.txt";
pub const BACKWARD_TRANSFER_TXT: &str = "backward_transfer.txt";
pub const RADAR_CSV: &str = "radar.csv";

/// Write every artifact into `dir`, creating it if needed.
pub fn write_outputs(results: &RunResults, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let forgetting = results.table(TableKind::Forgetting);
    let backward = results.table(TableKind::BackwardTransfer);

    let mut radar = csv::Writer::from_writer(Vec::new());
    for row in results.radar_rows() {
        radar.serialize(&row).expect("in-memory csv write");
    }
    let radar = radar.into_inner().expect("in-memory csv flush");

    let files: [(&str, Vec<u8>); 6] = [
        (RESULTS_FILE, results.to_json().into_bytes()),
        (FORGETTING_MD, forgetting.to_markdown().into_bytes()),
        (BACKWARD_TRANSFER_MD, backward.to_markdown().into_bytes()),
        (FORGETTING_TXT, forgetting.to_plain_text().into_bytes()),
        (BACKWARD_TRANSFER_TXT, backward.to_plain_text().into_bytes()),
        (RADAR_CSV, radar),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
