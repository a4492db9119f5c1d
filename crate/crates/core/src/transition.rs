//! Transition classification and the chance-adjusted flip metrics.
//!
//! Every item evaluated before and after a training stage lands in one of
//! four quadrants. Forgetting and backward transfer are the 1→0 and 0→1
//! flip rates. Under the know/guess response model (an item is either known,
//! or answered by a uniform draw over its `k` options, independently before
//! and after) a fraction of those flips is expected from guessing alone; the
//! chance baselines estimate that fraction from aggregate accuracies, and the
//! adjusted metrics subtract it.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransitionError {
    #[error("stratum mixes option counts k={first} and k={second}")]
    MixedStratum { first: u32, second: u32 },
    #[error("stratum is empty")]
    EmptyStratum,
    #[error("option count k={0} is invalid, need k >= 2")]
    BadOptionCount(u32),
    #[error("{name}={value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
}

/// Binary correctness of one answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Correctness {
    Incorrect,
    Correct,
}

impl Correctness {
    pub fn is_correct(self) -> bool {
        self == Correctness::Correct
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl From<bool> for Correctness {
    fn from(value: bool) -> Self {
        if value {
            Correctness::Correct
        } else {
            Correctness::Incorrect
        }
    }
}

impl From<Correctness> for u8 {
    fn from(value: Correctness) -> Self {
        value.as_u8()
    }
}

impl TryFrom<u8> for Correctness {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(Correctness::Incorrect),
            1 => Ok(Correctness::Correct),
            other => Err(format!("correctness must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    /// 1 → 1
    Retention,
    /// 1 → 0
    Forgetting,
    /// 0 → 1
    BackwardTransfer,
    /// 0 → 0
    NonAcquisition,
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Quadrant::Retention => "retention",
            Quadrant::Forgetting => "forgetting",
            Quadrant::BackwardTransfer => "backward transfer",
            Quadrant::NonAcquisition => "non-acquisition",
        };
        f.write_str(name)
    }
}

pub fn classify_transition(pre: Correctness, post: Correctness) -> Quadrant {
    use Correctness::*;
    match (pre, post) {
        (Correct, Correct) => Quadrant::Retention,
        (Correct, Incorrect) => Quadrant::Forgetting,
        (Incorrect, Correct) => Quadrant::BackwardTransfer,
        (Incorrect, Incorrect) => Quadrant::NonAcquisition,
    }
}

/// One item observed in both snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinedSample {
    pub sample_key: String,
    pub pre: Correctness,
    pub post: Correctness,
    pub k: u32,
}

impl JoinedSample {
    pub fn new(sample_key: impl Into<String>, pre: Correctness, post: Correctness, k: u32) -> Self {
        JoinedSample {
            sample_key: sample_key.into(),
            pre,
            post,
            k,
        }
    }

    pub fn quadrant(&self) -> Quadrant {
        classify_transition(self.pre, self.post)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub retention: u64,
    pub forgetting: u64,
    pub backward_transfer: u64,
    pub non_acquisition: u64,
    pub total: u64,
}

impl TransitionCounts {
    pub fn from_quadrants(retention: u64, forgetting: u64, backward_transfer: u64, non_acquisition: u64) -> Self {
        TransitionCounts {
            retention,
            forgetting,
            backward_transfer,
            non_acquisition,
            total: retention + forgetting + backward_transfer + non_acquisition,
        }
    }

    pub fn add(&mut self, quadrant: Quadrant) {
        match quadrant {
            Quadrant::Retention => self.retention += 1,
            Quadrant::Forgetting => self.forgetting += 1,
            Quadrant::BackwardTransfer => self.backward_transfer += 1,
            Quadrant::NonAcquisition => self.non_acquisition += 1,
        }
        self.total += 1;
    }

    pub fn get(&self, quadrant: Quadrant) -> u64 {
        match quadrant {
            Quadrant::Retention => self.retention,
            Quadrant::Forgetting => self.forgetting,
            Quadrant::BackwardTransfer => self.backward_transfer,
            Quadrant::NonAcquisition => self.non_acquisition,
        }
    }

    pub fn correct_pre(&self) -> u64 {
        self.retention + self.forgetting
    }

    pub fn correct_post(&self) -> u64 {
        self.retention + self.backward_transfer
    }

    /// Accuracy summary for a stratum with option count `k`.
    pub fn accuracy(&self, k: u32) -> Result<AccuracySummary, TransitionError> {
        if self.total == 0 {
            return Err(TransitionError::EmptyStratum);
        }
        let n = self.total as f64;
        AccuracySummary::new(
            self.correct_pre() as f64 / n,
            self.correct_post() as f64 / n,
            k,
            self.total,
        )
    }
}

/// Quadrant tallies for a stratum. All samples must share one `k`.
pub fn tally(samples: &[JoinedSample]) -> Result<TransitionCounts, TransitionError> {
    stratum_k(samples)?;
    let mut counts = TransitionCounts::default();
    for sample in samples {
        counts.add(sample.quadrant());
    }
    Ok(counts)
}

/// The single option count shared by `samples`, or `None` when empty.
pub fn stratum_k(samples: &[JoinedSample]) -> Result<Option<u32>, TransitionError> {
    let mut k = None;
    for sample in samples {
        match k {
            None => k = Some(sample.k),
            Some(first) if first != sample.k => {
                return Err(TransitionError::MixedStratum {
                    first,
                    second: sample.k,
                })
            }
            _ => {}
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawRates {
    pub forgetting: f64,
    pub backward_transfer: f64,
    pub acc_pre: f64,
    pub acc_post: f64,
}

pub fn raw_rates(counts: &TransitionCounts) -> Result<RawRates, TransitionError> {
    if counts.total == 0 {
        return Err(TransitionError::EmptyStratum);
    }
    let n = counts.total as f64;
    Ok(RawRates {
        forgetting: counts.forgetting as f64 / n,
        backward_transfer: counts.backward_transfer as f64 / n,
        acc_pre: counts.correct_pre() as f64 / n,
        acc_post: counts.correct_post() as f64 / n,
    })
}

fn check_fraction(name: &'static str, value: f64) -> Result<f64, TransitionError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(TransitionError::OutOfRange { name, value })
    }
}

fn check_k(k: u32) -> Result<f64, TransitionError> {
    if k < 2 {
        Err(TransitionError::BadOptionCount(k))
    } else {
        Ok(k as f64)
    }
}

/// Mean accuracies of one stratum before and after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub acc_pre: f64,
    pub acc_post: f64,
    pub k: u32,
    pub n: u64,
}

impl AccuracySummary {
    pub fn new(acc_pre: f64, acc_post: f64, k: u32, n: u64) -> Result<Self, TransitionError> {
        check_k(k)?;
        Ok(AccuracySummary {
            acc_pre: check_fraction("acc_pre", acc_pre)?,
            acc_post: check_fraction("acc_post", acc_post)?,
            k,
            n,
        })
    }
}

/// Expected fraction of items answered correctly by a lucky guess,
/// `(1 - acc) / (k - 1)`.
pub fn guess_mass(acc: f64, k: u32) -> Result<f64, TransitionError> {
    let k = check_k(k)?;
    let acc = check_fraction("acc", acc)?;
    Ok((1.0 - acc) / (k - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceBaselines {
    pub f_chance: f64,
    pub bt_chance: f64,
}

/// Flip rates expected from independent guessing alone.
///
/// A chance forgetting flip is a lucky guess before followed by an error
/// after; a chance backward-transfer flip is the converse.
pub fn chance_baselines(acc: &AccuracySummary) -> Result<ChanceBaselines, TransitionError> {
    let guessed_pre = guess_mass(acc.acc_pre, acc.k)?;
    let guessed_post = guess_mass(acc.acc_post, acc.k)?;
    Ok(ChanceBaselines {
        f_chance: guessed_pre * (1.0 - acc.acc_post),
        bt_chance: (1.0 - acc.acc_pre) * guessed_post,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustedMetrics {
    pub f_true: f64,
    pub bt_true: f64,
}

/// Raw flip rates minus their chance baselines, clipped at zero.
pub fn adjusted_metrics(forgetting: f64, backward_transfer: f64, chance: &ChanceBaselines) -> AdjustedMetrics {
    AdjustedMetrics {
        f_true: (forgetting - chance.f_chance).max(0.0),
        bt_true: (backward_transfer - chance.bt_chance).max(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ceilings {
    pub f_max: f64,
    pub bt_max: f64,
}

/// Truly-known fractions before and after: `max((k·acc - 1)/(k - 1), 0)`.
pub fn ceilings(acc: &AccuracySummary) -> Result<Ceilings, TransitionError> {
    let k = check_k(acc.k)?;
    let ceiling = |a: f64| ((k * a - 1.0) / (k - 1.0)).max(0.0);
    Ok(Ceilings {
        f_max: ceiling(acc.acc_pre),
        bt_max: ceiling(acc.acc_post),
    })
}

/// Task-level forgetting: accuracy drop clipped at zero.
pub fn conventional_forgetting(acc_pre: f64, acc_post: f64) -> f64 {
    (acc_pre - acc_post).max(0.0)
}

/// Every forgetting/backward-transfer figure for one stratum or aggregate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub f_raw: f64,
    pub bt_raw: f64,
    pub f_chance: f64,
    pub bt_chance: f64,
    pub f_true: f64,
    pub bt_true: f64,
    pub f_max: f64,
    pub bt_max: f64,
    pub f_conventional: f64,
}

impl MetricBundle {
    pub const FIELD_NAMES: [&'static str; 9] = [
        "f_raw",
        "bt_raw",
        "f_chance",
        "bt_chance",
        "f_true",
        "bt_true",
        "f_max",
        "bt_max",
        "f_conventional",
    ];

    /// Full metric computation for one stratum of option count `k`.
    pub fn from_counts(counts: &TransitionCounts, k: u32) -> Result<Self, TransitionError> {
        let raw = raw_rates(counts)?;
        let acc = AccuracySummary::new(raw.acc_pre, raw.acc_post, k, counts.total)?;
        let chance = chance_baselines(&acc)?;
        let adjusted = adjusted_metrics(raw.forgetting, raw.backward_transfer, &chance);
        let ceil = ceilings(&acc)?;
        Ok(MetricBundle {
            f_raw: raw.forgetting,
            bt_raw: raw.backward_transfer,
            f_chance: chance.f_chance,
            bt_chance: chance.bt_chance,
            f_true: adjusted.f_true,
            bt_true: adjusted.bt_true,
            f_max: ceil.f_max,
            bt_max: ceil.bt_max,
            f_conventional: conventional_forgetting(raw.acc_pre, raw.acc_post),
        })
    }

    pub fn from_samples(samples: &[JoinedSample]) -> Result<Self, TransitionError> {
        let k = stratum_k(samples)?.ok_or(TransitionError::EmptyStratum)?;
        Self::from_counts(&tally(samples)?, k)
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.f_raw,
            self.bt_raw,
            self.f_chance,
            self.bt_chance,
            self.f_true,
            self.bt_true,
            self.f_max,
            self.bt_max,
            self.f_conventional,
        ]
    }

    pub fn from_array(values: [f64; 9]) -> Self {
        let [f_raw, bt_raw, f_chance, bt_chance, f_true, bt_true, f_max, bt_max, f_conventional] = values;
        MetricBundle {
            f_raw,
            bt_raw,
            f_chance,
            bt_chance,
            f_true,
            bt_true,
            f_max,
            bt_max,
            f_conventional,
        }
    }

    /// Whether the adjusted metrics exceed their ceilings. Not enforced; reported.
    pub fn exceeds_ceiling(&self) -> bool {
        self.f_true > self.f_max + 1e-12 || self.bt_true > self.bt_max + 1e-12
    }
}
