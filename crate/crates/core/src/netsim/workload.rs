//! Message-size and inter-message-gap distributions.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

/// Upper bound on any sampled message size.
pub const MAX_MESSAGE_BYTES: f64 = 100e6;

/// A positive scalar distribution. Used for message sizes (bytes) and
/// inter-message gaps (milliseconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Dist {
    LogNormal { mu: f64, sigma: f64 },
    BoundedPareto { alpha: f64, min: f64, max: f64 },
    Fixed { value: f64 },
    Exponential { mean: f64 },
}

impl Dist {
    pub fn check(&self) -> Result<(), String> {
        let ok = match *self {
            Dist::LogNormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma >= 0.0,
            Dist::BoundedPareto { alpha, min, max } => alpha > 0.0 && min > 0.0 && max > min,
            Dist::Fixed { value } => value > 0.0 && value.is_finite(),
            Dist::Exponential { mean } => mean > 0.0 && mean.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid distribution parameters: {self:?}"))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            Dist::BoundedPareto { alpha, min, max } => {
                let ratio = (min / max).powf(alpha);
                if (alpha - 1.0).abs() < 1e-12 {
                    min * (max / min).ln() / (1.0 - ratio)
                } else {
                    min.powf(alpha) / (1.0 - ratio) * alpha / (alpha - 1.0)
                        * (min.powf(1.0 - alpha) - max.powf(1.0 - alpha))
                }
            }
            Dist::Fixed { value } => value,
            Dist::Exponential { mean } => mean,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::LogNormal { mu, sigma } => LogNormal::new(mu, sigma)
                .expect("checked parameters")
                .sample(rng),
            Dist::BoundedPareto { alpha, min, max } => {
                // Inverse CDF of the Pareto distribution truncated to [min, max].
                let u: f64 = rng.random();
                let tail = 1.0 - (min / max).powf(alpha);
                min / (1.0 - u * tail).powf(1.0 / alpha)
            }
            Dist::Fixed { value } => value,
            Dist::Exponential { mean } => Exp::new(1.0 / mean)
                .expect("checked parameters")
                .sample(rng),
        }
    }
}

/// Per-flow application workload: messages of random size arriving after
/// random gaps. When `message_gap_ms` is `None` the gaps are exponential with
/// the mean that makes each flow offer `base_rate_mbps` on average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub message_size: Dist,
    pub message_gap_ms: Option<Dist>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            message_size: Dist::BoundedPareto {
                alpha: 1.2,
                min: 1_000.0,
                max: 10_000_000.0,
            },
            message_gap_ms: None,
        }
    }
}

impl WorkloadSpec {
    pub fn check(&self) -> Result<(), String> {
        self.message_size.check()?;
        if let Some(g) = &self.message_gap_ms {
            g.check()?;
        }
        Ok(())
    }

    /// The gap distribution actually used for a flow offering `rate_mbps`.
    pub fn gap_dist(&self, rate_mbps: f64) -> Dist {
        self.message_gap_ms.unwrap_or_else(|| {
            let bits = self.message_size.mean().min(MAX_MESSAGE_BYTES) * 8.0;
            Dist::Exponential {
                mean: bits / (rate_mbps * 1000.0),
            }
        })
    }

    pub fn sample_size<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.message_size
            .sample(rng)
            .clamp(1.0, MAX_MESSAGE_BYTES)
            .round()
            .max(1.0) as u64
    }
}
