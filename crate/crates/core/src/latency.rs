//! Parametric latency models and seeded sample streams.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, LogNormal as LogNormalCdf};

use crate::clock::from_ms;

/// Latency distribution in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatencyModel {
    Fixed { ms: f64 },
    Exponential { mean_ms: f64 },
    /// `ln(latency_ms)` is normal with mean `mu` and standard deviation `sigma`.
    Lognormal { mu: f64, sigma: f64 },
    /// Resamples uniformly from recorded latencies.
    Empirical { samples_ms: Vec<f64> },
}

impl LatencyModel {
    pub fn zero() -> Self {
        LatencyModel::Fixed { ms: 0.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        match self {
            LatencyModel::Fixed { ms } if !finite_nonneg(*ms) => {
                Err(format!("fixed latency {ms} must be finite and non-negative"))
            }
            LatencyModel::Exponential { mean_ms } if !(mean_ms.is_finite() && *mean_ms > 0.0) => {
                Err(format!("exponential mean {mean_ms} must be positive"))
            }
            LatencyModel::Lognormal { mu, sigma }
                if !(mu.is_finite() && sigma.is_finite() && *sigma > 0.0) =>
            {
                Err(format!("lognormal mu {mu} / sigma {sigma} invalid (sigma > 0)"))
            }
            LatencyModel::Empirical { samples_ms } if samples_ms.is_empty() => {
                Err("empirical model needs at least one sample".into())
            }
            LatencyModel::Empirical { samples_ms }
                if samples_ms.iter().any(|v| !finite_nonneg(*v)) =>
            {
                Err("empirical samples must be finite and non-negative".into())
            }
            _ => Ok(()),
        }
    }

    /// Analytic mean in milliseconds.
    pub fn mean_ms(&self) -> f64 {
        match self {
            LatencyModel::Fixed { ms } => *ms,
            LatencyModel::Exponential { mean_ms } => *mean_ms,
            LatencyModel::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            LatencyModel::Empirical { samples_ms } => {
                samples_ms.iter().sum::<f64>() / samples_ms.len() as f64
            }
        }
    }

    /// Closed-form CDF at `x_ms`; `None` for empirical models.
    pub fn cdf(&self, x_ms: f64) -> Option<f64> {
        match self {
            LatencyModel::Fixed { ms } => Some(if x_ms >= *ms { 1.0 } else { 0.0 }),
            LatencyModel::Exponential { mean_ms } => Some(if x_ms <= 0.0 {
                0.0
            } else {
                1.0 - (-x_ms / mean_ms).exp()
            }),
            LatencyModel::Lognormal { mu, sigma } => {
                if x_ms <= 0.0 {
                    return Some(0.0);
                }
                LogNormalCdf::new(*mu, *sigma).ok().map(|d| d.cdf(x_ms))
            }
            LatencyModel::Empirical { .. } => None,
        }
    }

    pub fn sample_ms<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            LatencyModel::Fixed { ms } => *ms,
            LatencyModel::Exponential { mean_ms } => {
                Exp::new(1.0 / mean_ms).expect("validated").sample(rng)
            }
            LatencyModel::Lognormal { mu, sigma } => {
                LogNormal::new(*mu, *sigma).expect("validated").sample(rng)
            }
            LatencyModel::Empirical { samples_ms } => {
                samples_ms[rng.random_range(0..samples_ms.len())]
            }
        }
    }
}

/// Independent RNG stream keyed by `(seed, label, id)`. Streams for different
/// keys never share state, so adding a replica leaves the others untouched.
pub fn stream_rng(seed: u64, label: &str, id: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update((label.len() as u32).to_be_bytes());
    h.update(label.as_bytes());
    h.update(id.to_be_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// A model bound to its own RNG stream.
#[derive(Clone, Debug)]
pub struct LatencySampler {
    model: LatencyModel,
    rng: ChaCha8Rng,
}

impl LatencySampler {
    pub fn new(model: LatencyModel, rng: ChaCha8Rng) -> Self {
        Self { model, rng }
    }

    pub fn keyed(model: LatencyModel, seed: u64, label: &str, id: u64) -> Self {
        Self::new(model, stream_rng(seed, label, id))
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn sample(&mut self) -> Duration {
        from_ms(self.model.sample_ms(&mut self.rng))
    }
}
