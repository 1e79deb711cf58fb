use serde::{Deserialize, Serialize};

use super::{Tensor2D, TensorError};

/// `lr = d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub d_model: usize,
    pub warmup_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            d_model: 64,
            warmup_steps: 2000,
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> Result<f64, TensorError> {
    if step == 0 {
        return Err(TensorError::StepZero);
    }
    if schedule.d_model == 0 || schedule.warmup_steps == 0 {
        return Err(TensorError::Invalid("d_model and warmup_steps must be positive".into()));
    }
    let s = step as f64;
    let w = schedule.warmup_steps as f64;
    Ok((schedule.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam moments for a list of parameter blocks, plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor2D]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 1e-5,
        }
    }
}

/// One Adam update over `params` using their accumulated gradients. Weight
/// decay is decoupled and applied before the moment update. Blocks without a
/// gradient buffer are treated as having zero gradient. Nothing is modified
/// if any gradient is non-finite.
pub fn adam_step(params: &mut [Tensor2D], state: &mut AdamState, lr: f64) -> Result<(), TensorError> {
    if state.m.len() != params.len() {
        return Err(TensorError::Invalid(format!(
            "optimizer state has {} blocks, parameters have {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                a: p.shape(),
                b: (state.m[i].len(), 1),
            });
        }
        if let Some(g) = &p.grad {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGradient { block: p.name.clone() });
            }
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let g = p.grad.as_ref().map_or(0.0, |g| g[j]);
            p.data[j] -= lr * state.weight_decay * p.data[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.data[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
