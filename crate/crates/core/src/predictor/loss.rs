use serde::{Deserialize, Serialize};

use super::PredictorError;
use crate::trace_model::SharpChangeThresholds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub thresholds: SharpChangeThresholds,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 10.0,
            thresholds: SharpChangeThresholds::default(),
        }
    }
}

impl LossConfig {
    /// Plain MSE.
    pub fn mse() -> Self {
        LossConfig {
            alpha: 1.0,
            ..LossConfig::default()
        }
    }

    pub fn check(&self) -> Result<(), PredictorError> {
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(PredictorError::Config(format!("loss alpha {} must be >= 1", self.alpha)));
        }
        self.thresholds.check().map_err(PredictorError::Config)
    }
}

/// Per-position loss weights: `alpha` where the target steps sharply from
/// the previous ACKed target (or `prev` for the first), 1 elsewhere, and 0
/// where the target is missing.
pub fn change_point_weights(targets: &[Option<f64>], prev: Option<f64>, cfg: &LossConfig) -> Vec<f64> {
    let mut last = prev;
    targets
        .iter()
        .map(|t| match *t {
            None => 0.0,
            Some(cur) => {
                let sharp = last.is_some_and(|p| cfg.thresholds.classify(p, cur).is_some());
                last = Some(cur);
                if sharp {
                    cfg.alpha
                } else {
                    1.0
                }
            }
        })
        .collect()
}

/// Mean over positions of `alpha·(p−t)²` at sharp target steps and `(p−t)²`
/// elsewhere; `prev_target` is the latency just before the first target.
pub fn change_point_loss(
    pred: &[f64],
    target: &[f64],
    prev_target: f64,
    cfg: &LossConfig,
) -> Result<f64, PredictorError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(PredictorError::Shape(format!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    let t: Vec<Option<f64>> = target.iter().copied().map(Some).collect();
    let w = change_point_weights(&t, Some(prev_target), cfg);
    let total: f64 = pred
        .iter()
        .zip(target)
        .zip(&w)
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum();
    Ok(total / pred.len() as f64)
}
