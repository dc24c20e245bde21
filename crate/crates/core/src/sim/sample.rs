use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::prob::NormalParams;
use crate::task::{ExecModel, Micros};

/// Sporadic higher-priority work stealing the CPU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interference {
    /// Poisson arrival rate, events per second.
    pub rate: f64,
    #[serde(rename = "magnitude_us")]
    pub magnitude: Micros,
}

/// System noise added on top of a task's own runtime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Fixed per-job overhead.
    #[serde(rename = "base_overhead_us")]
    pub base_overhead: Micros,
    /// Per-activation latency in µs, truncated at 0.
    #[serde(rename = "latency_jitter_us")]
    pub latency_jitter: NormalParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interference: Option<Interference>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            base_overhead: 0,
            latency_jitter: NormalParams::new(0.0, 0.0),
            interference: None,
        }
    }
}

fn normal_draw<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        mu
    } else {
        Normal::new(mu, sigma).expect("finite normal").sample(rng)
    }
}

/// Draws from `N(mu, sigma)` conditioned on being ≥ 0. Falls back to 0 when
/// the accepted region is too unlikely to hit by rejection.
fn truncated_at_zero<R: Rng + ?Sized>(p: NormalParams, rng: &mut R) -> f64 {
    if p.sigma == 0.0 {
        return p.mu.max(0.0);
    }
    for _ in 0..1024 {
        let x = normal_draw(p.mu, p.sigma, rng);
        if x >= 0.0 {
            return x;
        }
    }
    0.0
}

/// One job's execution demand: a draw from the (mixture) normal clamped to
/// `[cutoff_lo, wcet]`, plus the fixed overhead and latency jitter.
pub fn sample_runtime<R: Rng + ?Sized>(
    model: &ExecModel,
    noise: &NoiseModel,
    rng: &mut R,
) -> Micros {
    let mut offset = 0.0;
    if !model.mixture.is_empty() {
        let u: f64 = rng.random();
        let mut acc = model.primary_weight();
        if u >= acc {
            for m in &model.mixture {
                acc += m.weight;
                offset = m.offset as f64;
                if u < acc {
                    break;
                }
            }
        }
    }
    let raw = normal_draw(model.mu as f64 + offset, model.sigma as f64, rng).round();
    let own = raw.clamp(model.cutoff_lo as f64, model.wcet as f64) as Micros;
    let jitter = truncated_at_zero(noise.latency_jitter, rng).round() as Micros;
    own + noise.base_overhead + jitter
}

/// Gap to the next interference arrival, at least 1 µs.
pub(crate) fn interarrival<R: Rng + ?Sized>(rate_per_s: f64, rng: &mut R) -> Micros {
    let exp = Exp::new(rate_per_s / 1e6).expect("positive rate");
    (exp.sample(rng).round() as Micros).max(1)
}
