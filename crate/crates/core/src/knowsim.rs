//! Monte-Carlo model of the know/guess response process, with exact
//! expectations, for validating the chance-corrected estimators.
//!
//! Each item is known before training with probability `p_know_pre`. A
//! known item stays known with probability `p_retain`; an unknown item
//! becomes known with probability `p_learn`. Known items are answered
//! correctly; unknown items are answered by a uniform draw over `k`
//! options, independently before and after.
//!
//! Seeding contract (ChaCha8, `rand_chacha::ChaCha8Rng`): items are split
//! into blocks of [`BLOCK_SIZE`]. Knowledge for block `b` comes from
//! `seed_from_u64(seed)` on stream `b`, two uniform draws per item (know
//! before, know after). Guesses of run `r` for block `b` come from
//! `seed_from_u64(guess_seed(seed, r))` on stream `b`, two draws in
//! `0..k` per item (before, after); draw 0 is the correct option. Runs share
//! knowledge states and differ only in guesses.

use crate::ingest::{Payload, SampleRecord};
use crate::transition::{
    ceilings, chance_baselines, conventional_forgetting, AccuracySummary, Correctness, JoinedSample, MetricBundle,
    TransitionError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLOCK_SIZE: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("{name}={value} is outside [0, 1]")]
    BadProbability { name: &'static str, value: f64 },
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error("option count k={0} is invalid, need k >= 2")]
    BadOptionCount(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n: usize,
    pub k: u32,
    pub p_know_pre: f64,
    pub p_retain: f64,
    pub p_learn: f64,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn new(n: usize, k: u32, p_know_pre: f64, p_retain: f64, p_learn: f64, seed: u64) -> Result<Self, SimError> {
        let spec = PopulationSpec {
            n,
            k,
            p_know_pre,
            p_retain,
            p_learn,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::EmptyPopulation);
        }
        if self.k < 2 {
            return Err(SimError::BadOptionCount(self.k));
        }
        for (name, value) in [
            ("p_know_pre", self.p_know_pre),
            ("p_retain", self.p_retain),
            ("p_learn", self.p_learn),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::BadProbability { name, value });
            }
        }
        Ok(())
    }

    /// Fraction of items known before and not after.
    pub fn planted_loss(&self) -> f64 {
        self.p_know_pre * (1.0 - self.p_retain)
    }

    /// Fraction of items unknown before and known after.
    pub fn planted_gain(&self) -> f64 {
        (1.0 - self.p_know_pre) * self.p_learn
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuessModel {
    #[default]
    Independent,
    /// An item unknown both times repeats its earlier guess. Breaks the
    /// independence the chance baselines assume.
    Correlated,
}

/// Seed of the guess stream for run `run`.
pub fn guess_seed(seed: u64, run: u64) -> u64 {
    seed ^ (run + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn item_key(index: usize) -> String {
    format!("item{index:07}")
}

fn knowledge_block(spec: &PopulationSpec, block: usize, len: usize) -> Vec<(bool, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(block as u64);
    (0..len)
        .map(|_| {
            let known_pre = rng.random::<f64>() < spec.p_know_pre;
            let u: f64 = rng.random();
            let known_post = if known_pre { u < spec.p_retain } else { u < spec.p_learn };
            (known_pre, known_post)
        })
        .collect()
}

fn simulate_block(spec: &PopulationSpec, run: u64, model: GuessModel, block: usize) -> Vec<JoinedSample> {
    let start = block * BLOCK_SIZE;
    let len = BLOCK_SIZE.min(spec.n - start);
    let knowledge = knowledge_block(spec, block, len);
    let mut rng = ChaCha8Rng::seed_from_u64(guess_seed(spec.seed, run));
    rng.set_stream(block as u64);
    knowledge
        .into_iter()
        .enumerate()
        .map(|(i, (known_pre, known_post))| {
            let guess_pre = rng.random_range(0..spec.k);
            let mut guess_post = rng.random_range(0..spec.k);
            if model == GuessModel::Correlated && !known_pre && !known_post {
                guess_post = guess_pre;
            }
            JoinedSample::new(
                item_key(start + i),
                Correctness::from(known_pre || guess_pre == 0),
                Correctness::from(known_post || guess_post == 0),
                spec.k,
            )
        })
        .collect()
}

pub fn simulate_run(spec: &PopulationSpec, run: u64, model: GuessModel) -> Vec<JoinedSample> {
    let blocks = spec.n.div_ceil(BLOCK_SIZE);
    (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| simulate_block(spec, run, model, b))
        .collect()
}

/// Paired samples of one run under independent guessing.
pub fn simulate(spec: &PopulationSpec) -> Vec<JoinedSample> {
    simulate_run(spec, 0, GuessModel::Independent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantRates {
    pub retention: f64,
    pub forgetting: f64,
    pub backward_transfer: f64,
    pub non_acquisition: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedMetrics {
    pub acc_pre: f64,
    pub acc_post: f64,
    pub rates: QuadrantRates,
    pub bundle: MetricBundle,
}

/// Exact expectations under independent guessing, by enumerating the four
/// know-state transitions and, within each, the four guess outcomes.
///
/// The adjusted metrics and ceilings are the estimator formulas evaluated at
/// the expected rates and accuracies (the large-n limit of the estimator).
pub fn expected_metrics(spec: &PopulationSpec) -> Result<ExpectedMetrics, TransitionError> {
    let guess = 1.0 / spec.k as f64;
    let p_correct = |known: bool| if known { 1.0 } else { guess };
    let states = [
        (true, true, spec.p_know_pre * spec.p_retain),
        (true, false, spec.p_know_pre * (1.0 - spec.p_retain)),
        (false, true, (1.0 - spec.p_know_pre) * spec.p_learn),
        (false, false, (1.0 - spec.p_know_pre) * (1.0 - spec.p_learn)),
    ];
    let mut rates = QuadrantRates {
        retention: 0.0,
        forgetting: 0.0,
        backward_transfer: 0.0,
        non_acquisition: 0.0,
    };
    for (known_pre, known_post, p_state) in states {
        let (a, b) = (p_correct(known_pre), p_correct(known_post));
        rates.retention += p_state * a * b;
        rates.forgetting += p_state * a * (1.0 - b);
        rates.backward_transfer += p_state * (1.0 - a) * b;
        rates.non_acquisition += p_state * (1.0 - a) * (1.0 - b);
    }
    let acc_pre = (rates.retention + rates.forgetting).clamp(0.0, 1.0);
    let acc_post = (rates.retention + rates.backward_transfer).clamp(0.0, 1.0);
    let acc = AccuracySummary::new(acc_pre, acc_post, spec.k, spec.n as u64)?;
    let chance = chance_baselines(&acc)?;
    let ceil = ceilings(&acc)?;
    Ok(ExpectedMetrics {
        acc_pre,
        acc_post,
        rates,
        bundle: MetricBundle {
            f_raw: rates.forgetting,
            bt_raw: rates.backward_transfer,
            f_chance: chance.f_chance,
            bt_chance: chance.bt_chance,
            f_true: (rates.forgetting - chance.f_chance).max(0.0),
            bt_true: (rates.backward_transfer - chance.bt_chance).max(0.0),
            f_max: ceil.f_max,
            bt_max: ceil.bt_max,
            f_conventional: conventional_forgetting(acc_pre, acc_post),
        },
    })
}

/// Names stamped on synthetic log records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticLabels {
    pub pre_model: String,
    pub post_model: String,
    pub benchmark: String,
    pub subtask: String,
}

impl Default for SyntheticLabels {
    fn default() -> Self {
        SyntheticLabels {
            pre_model: "sim-pre".into(),
            post_model: "sim-post".into(),
            benchmark: "synthetic".into(),
            subtask: "default".into(),
        }
    }
}

/// Pre and post snapshot records for `runs` simulated runs, in the ingest schema.
pub fn synthetic_logs(
    spec: &PopulationSpec,
    runs: u64,
    model: GuessModel,
    labels: &SyntheticLabels,
) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut pre = Vec::with_capacity(spec.n * runs as usize);
    let mut post = Vec::with_capacity(spec.n * runs as usize);
    for run in 0..runs {
        for s in simulate_run(spec, run, model) {
            let record = |model_id: &str, c: Correctness| SampleRecord {
                model_id: model_id.to_string(),
                benchmark: labels.benchmark.clone(),
                subtask: labels.subtask.clone(),
                sample_key: s.sample_key.clone(),
                k: s.k,
                run_id: run.to_string(),
                payload: Payload::Scored(c),
                gold: None,
            };
            pre.push(record(&labels.pre_model, s.pre));
            post.push(record(&labels.post_model, s.post));
        }
    }
    (pre, post)
}
