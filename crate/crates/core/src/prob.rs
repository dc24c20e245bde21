//! Normal-distribution arithmetic for deadline-miss estimation.
//!
//! Task runtimes are modelled as independent normals. Dividing each by its
//! period moves it into utilization space; the sum of those is again normal
//! with added means and added variances, and the miss probability is its
//! right-tail mass beyond the resource's maximum utilization.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::task::{Micros, TaskSpec};

/// Minimum number of samples accepted by [`fit_to_normal`].
pub const MIN_FIT_SAMPLES: u64 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl NormalParams {
    pub fn new(mu: f64, sigma: f64) -> Self {
        debug_assert!(
            mu.is_finite() && sigma >= 0.0,
            "invalid normal ({mu}, {sigma})"
        );
        Self { mu, sigma }
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if self.sigma == 0.0 {
            return if x >= self.mu { 1.0 } else { 0.0 };
        }
        std_normal_cdf((x - self.mu) / self.sigma)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProbError {
    #[error("no tasks")]
    NoTasks,
    #[error("period must be > 0")]
    ZeroPeriod,
    #[error("insufficient samples: {count} < {MIN_FIT_SAMPLES}")]
    InsufficientSamples { count: u64 },
}

/// Standard normal CDF Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Sum of per-task runtime normals, each scaled by `1 / period`.
///
/// Means add and variances add; the result lives in utilization space.
pub fn joint_utilization<'a, I>(models: I) -> Result<NormalParams, ProbError>
where
    I: IntoIterator<Item = &'a (NormalParams, Micros)>,
{
    let mut means = Vec::new();
    let mut variances = Vec::new();
    for (p, period) in models {
        if *period == 0 {
            return Err(ProbError::ZeroPeriod);
        }
        let period = *period as f64;
        means.push(p.mu / period);
        variances.push((p.sigma / period).powi(2));
    }
    if means.is_empty() {
        return Err(ProbError::NoTasks);
    }
    Ok(NormalParams::new(
        compensated_sum(means),
        compensated_sum(variances).sqrt(),
    ))
}

/// Right-tail probability `P[U > u_max]` for `U ~ joint`.
pub fn miss_probability(joint: NormalParams, u_max: f64) -> f64 {
    if joint.sigma == 0.0 {
        return if joint.mu <= u_max { 0.0 } else { 1.0 };
    }
    // Φ(-z) keeps full relative precision deep in the tail.
    std_normal_cdf((joint.mu - u_max) / joint.sigma)
}

/// Exact `Σ budget/period` when it fits in 128-bit rationals.
fn exact_utilization<'a>(tasks: impl Iterator<Item = &'a TaskSpec>) -> Option<Ratio<i128>> {
    let mut total = Ratio::<i128>::from_integer(0);
    for t in tasks {
        if t.period == 0 {
            return None;
        }
        let term = Ratio::new(t.budget as i128, t.period as i128);
        let denom = lcm(*total.denom(), *term.denom())?;
        let a = total.numer().checked_mul(denom / total.denom())?;
        let b = term.numer().checked_mul(denom / term.denom())?;
        total = Ratio::new(a.checked_add(b)?, denom);
    }
    Some(total)
}

fn lcm(a: i128, b: i128) -> Option<i128> {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    (a / x).checked_mul(b)
}

fn ratio_to_f64(r: Ratio<i128>) -> f64 {
    // Both parts are below 2^53 for any realistic period set, in which case
    // this division is correctly rounded.
    *r.numer() as f64 / *r.denom() as f64
}

/// `Σ budget/period`, exact before the final rounding where possible.
pub fn total_utilization<'a>(tasks: impl IntoIterator<Item = &'a TaskSpec>) -> f64 {
    let tasks: Vec<&TaskSpec> = tasks.into_iter().collect();
    match exact_utilization(tasks.iter().copied()) {
        Some(r) => ratio_to_f64(r),
        None => compensated_sum(tasks.iter().map(|t| crate::task::utilization(t))),
    }
}

/// Shared buffer `1 − Σ budget/period`. Negative when oversubscribed.
pub fn buffer<'a>(tasks: impl IntoIterator<Item = &'a TaskSpec>) -> f64 {
    let tasks: Vec<&TaskSpec> = tasks.into_iter().collect();
    match exact_utilization(tasks.iter().copied()) {
        Some(r) => ratio_to_f64(Ratio::from_integer(1) - r),
        None => 1.0 - compensated_sum(tasks.iter().map(|t| crate::task::utilization(t))),
    }
}

/// Streaming runtime statistics for one task.
///
/// Mean and variance use Welford's recurrence. Integer samples are also
/// tallied so [`fit_to_normal`] can compute an exact Kolmogorov–Smirnov
/// statistic without retaining the stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamingFit {
    count: u64,
    mean: f64,
    m2: f64,
    min_seen: f64,
    max_seen: f64,
    tally: BTreeMap<Micros, u64>,
}

impl StreamingFit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: impl IntoIterator<Item = Micros>) -> Self {
        let mut fit = Self::new();
        for s in samples {
            fit.push(s);
        }
        fit
    }

    pub fn push(&mut self, sample: Micros) {
        let x = sample as f64;
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        if self.count == 1 {
            self.min_seen = x;
            self.max_seen = x;
        } else {
            self.min_seen = self.min_seen.min(x);
            self.max_seen = self.max_seen.max(x);
        }
        *self.tally.entry(sample).or_insert(0) += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    pub fn min_seen(&self) -> f64 {
        self.min_seen
    }

    pub fn max_seen(&self) -> f64 {
        self.max_seen
    }

    /// Sample variance `m2 / (count − 1)`; 0 below two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Sample value → occurrence count.
    pub fn tally(&self) -> &BTreeMap<Micros, u64> {
        &self.tally
    }
}

/// Folds one sample into `state`.
pub fn fit_update(mut state: StreamingFit, sample: Micros) -> StreamingFit {
    state.push(sample);
    state
}

/// Fits a normal to the stream and scores it with the one-sample KS
/// statistic (0 is a perfect fit).
///
/// Samples are whole microseconds, so each value `k` stands for the cell
/// `[k − ½, k + ½)` and the empirical CDF is compared with the fitted one at
/// cell edges. A constant stream fits its degenerate distribution exactly.
pub fn fit_to_normal(state: &StreamingFit) -> Result<(NormalParams, f64), ProbError> {
    if state.count < MIN_FIT_SAMPLES {
        return Err(ProbError::InsufficientSamples { count: state.count });
    }
    let params = NormalParams::new(state.mean, state.std_dev());
    if params.sigma == 0.0 {
        return Ok((params, 0.0));
    }
    let n = state.count as f64;
    let mut below = 0u64;
    let mut ks = 0.0f64;
    for (&value, &c) in &state.tally {
        let lo = value as f64 - 0.5;
        let hi = value as f64 + 0.5;
        let before = below as f64 / n;
        below += c;
        let after = below as f64 / n;
        ks = ks
            .max((before - params.cdf(lo)).abs())
            .max((after - params.cdf(hi)).abs());
    }
    Ok((params, ks))
}
