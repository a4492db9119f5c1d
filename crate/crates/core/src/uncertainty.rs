//! Dispersion of the metric bundle: standard deviation across repeated
//! evaluation runs, or bootstrap resampling of items when only one run
//! exists.
//!
//! Bootstrap seeding contract: replicate `r` draws from ChaCha8
//! (`rand_chacha::ChaCha8Rng`) seeded with `seed_from_u64(seed)` and
//! switched to stream `r`. Within a replicate, strata are resampled in the
//! order given, each by `n` uniform index draws. The result therefore does
//! not depend on the thread count.

use crate::taxonomy::{combine, StratumStats, Weighting};
use crate::transition::{JoinedSample, MetricBundle, Quadrant, TransitionCounts, TransitionError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const MIN_RESAMPLES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("need at least 2 runs for a run-to-run std, got {0}")]
    InsufficientRuns(usize),
    #[error("bootstrap needs at least {MIN_RESAMPLES} resamples, got {0}")]
    TooFewResamples(usize),
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    /// Multi-run when at least two run pairs exist, bootstrap otherwise.
    #[default]
    Auto,
    MultiRun,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySpec {
    pub mode: UncertaintyMode,
    pub resamples: usize,
    pub seed: u64,
}

impl UncertaintySpec {
    pub fn new(mode: UncertaintyMode, resamples: usize, seed: u64) -> Result<Self, UncertaintyError> {
        if mode != UncertaintyMode::MultiRun && resamples < MIN_RESAMPLES {
            return Err(UncertaintyError::TooFewResamples(resamples));
        }
        Ok(UncertaintySpec { mode, resamples, seed })
    }

    /// The concrete mode for a comparison with `run_pairs` paired runs.
    pub fn resolve(&self, run_pairs: usize) -> UncertaintyMode {
        match self.mode {
            UncertaintyMode::Auto if run_pairs >= 2 => UncertaintyMode::MultiRun,
            UncertaintyMode::Auto => UncertaintyMode::Bootstrap,
            other => other,
        }
    }
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        UncertaintySpec {
            mode: UncertaintyMode::Auto,
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Field-wise sample std over per-run bundles.
pub fn per_field_std(bundles: &[MetricBundle]) -> MetricBundle {
    let arrays: Vec<[f64; 9]> = bundles.iter().map(MetricBundle::to_array).collect();
    let mut out = [0.0; 9];
    for (field, slot) in out.iter_mut().enumerate() {
        let column: Vec<f64> = arrays.iter().map(|a| a[field]).collect();
        *slot = sample_std(&column);
    }
    MetricBundle::from_array(out)
}

pub fn multirun_std(per_run: &[MetricBundle]) -> Result<MetricBundle, UncertaintyError> {
    if per_run.len() < 2 {
        return Err(UncertaintyError::InsufficientRuns(per_run.len()));
    }
    Ok(per_field_std(per_run))
}

fn quadrant_codes(samples: &[JoinedSample]) -> Vec<Quadrant> {
    samples.iter().map(JoinedSample::quadrant).collect()
}

fn resample(codes: &[Quadrant], rng: &mut ChaCha8Rng) -> TransitionCounts {
    let mut counts = TransitionCounts::default();
    for _ in 0..codes.len() {
        counts.add(codes[rng.random_range(0..codes.len())]);
    }
    counts
}

/// Bootstrap std of the combined bundle of several strata. Each replicate
/// resamples every stratum independently and recombines with `weighting`.
pub fn bootstrap_std_strata(
    strata: &[&[JoinedSample]],
    weighting: Weighting,
    spec: &UncertaintySpec,
) -> Result<MetricBundle, UncertaintyError> {
    if spec.resamples < MIN_RESAMPLES {
        return Err(UncertaintyError::TooFewResamples(spec.resamples));
    }
    let mut prepared = Vec::with_capacity(strata.len());
    for samples in strata {
        let k = crate::transition::stratum_k(samples)?.ok_or(TransitionError::EmptyStratum)?;
        prepared.push((quadrant_codes(samples), k));
    }
    if prepared.is_empty() {
        return Err(TransitionError::EmptyStratum.into());
    }

    let replicates = (0..spec.resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(r);
            let members: Vec<StratumStats> = prepared
                .iter()
                .map(|(codes, k)| StratumStats {
                    counts: resample(codes, &mut rng),
                    k: *k,
                })
                .collect();
            combine("", &members, weighting).map(|row| row.bundle)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_field_std(&replicates))
}

pub fn bootstrap_std(samples: &[JoinedSample], spec: &UncertaintySpec) -> Result<MetricBundle, UncertaintyError> {
    bootstrap_std_strata(&[samples], Weighting::Samples, spec)
}
