//! Exact-arithmetic reference implementations shared by test targets.
#![allow(dead_code)]

use num_rational::Ratio;

pub type Q = Ratio<i128>;

pub fn q(n: i128, d: i128) -> Q {
    Q::new(n, d)
}

pub fn to_f64(x: Q) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

fn clip(x: Q) -> Q {
    if x < Q::from_integer(0) {
        Q::from_integer(0)
    } else {
        x
    }
}

/// Metric bundle from quadrant counts, in exact rationals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactBundle {
    pub acc_pre: Q,
    pub acc_post: Q,
    pub retention: Q,
    pub f_raw: Q,
    pub bt_raw: Q,
    pub f_chance: Q,
    pub bt_chance: Q,
    pub f_true: Q,
    pub bt_true: Q,
    pub f_max: Q,
    pub bt_max: Q,
    pub f_conventional: Q,
}

impl ExactBundle {
    pub fn from_counts(r: u64, f: u64, bt: u64, na: u64, k: u32) -> Self {
        let n = (r + f + bt + na) as i128;
        let k = k as i128;
        let one = Q::from_integer(1);
        let acc_pre = q((r + f) as i128, n);
        let acc_post = q((r + bt) as i128, n);
        let f_raw = q(f as i128, n);
        let bt_raw = q(bt as i128, n);
        let x_pre = (one - acc_pre) / Q::from_integer(k - 1);
        let x_post = (one - acc_post) / Q::from_integer(k - 1);
        let f_chance = x_pre * (one - acc_post);
        let bt_chance = (one - acc_pre) * x_post;
        let ceiling = |acc: Q| clip((Q::from_integer(k) * acc - one) / Q::from_integer(k - 1));
        ExactBundle {
            acc_pre,
            acc_post,
            retention: q(r as i128, n),
            f_raw,
            bt_raw,
            f_chance,
            bt_chance,
            f_true: clip(f_raw - f_chance),
            bt_true: clip(bt_raw - bt_chance),
            f_max: ceiling(acc_pre),
            bt_max: ceiling(acc_post),
            f_conventional: clip(acc_pre - acc_post),
        }
    }

    /// Same field order as `MetricBundle::to_array`.
    pub fn to_array(self) -> [f64; 9] {
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
        .map(to_f64)
    }
}

/// Exact expected quadrant rates of the know/guess population: each item is
/// known before with `p_know_pre`; a known item stays known with `p_retain`;
/// an unknown one becomes known with `p_learn`; unknown answers are uniform
/// over `k` options, independently before and after.
pub fn exact_population_rates(k: i128, p_know_pre: Q, p_retain: Q, p_learn: Q) -> [Q; 4] {
    let one = Q::from_integer(1);
    let g = q(1, k);
    let mut rates = [Q::from_integer(0); 4]; // retention, forgetting, backward transfer, non-acquisition
    for (known_pre, known_post, p) in [
        (true, true, p_know_pre * p_retain),
        (true, false, p_know_pre * (one - p_retain)),
        (false, true, (one - p_know_pre) * p_learn),
        (false, false, (one - p_know_pre) * (one - p_learn)),
    ] {
        let a = if known_pre { one } else { g };
        let b = if known_post { one } else { g };
        rates[0] += p * a * b;
        rates[1] += p * a * (one - b);
        rates[2] += p * (one - a) * b;
        rates[3] += p * (one - a) * (one - b);
    }
    rates
}

/// Exact F_true implied by the expected rates.
pub fn exact_population_f_true(k: i128, rates: [Q; 4]) -> Q {
    let one = Q::from_integer(1);
    let acc_pre = rates[0] + rates[1];
    let acc_post = rates[0] + rates[2];
    let f_chance = (one - acc_pre) / Q::from_integer(k - 1) * (one - acc_post);
    clip(rates[1] - f_chance)
}
