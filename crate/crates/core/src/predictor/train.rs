use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{build_window, last_acked_at_or_before, targets_after, ContextWindow, Visibility};
use super::loss::{change_point_weights, LossConfig};
use super::model::{ModelParams, HEAD_BLOCKS};
use super::PredictorError;
use crate::tensor_nn::{adam_step, lr_at, AdamState, Graph, LrSchedule};
use crate::trace_model::PacketRecord;

/// One training example: a window, the next `B` latencies (missing where
/// not ACKed) and the latency just before the first target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: ContextWindow,
    pub targets: Vec<Option<f64>>,
    pub prev: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Windows ending at each of `bases` (stream indices).
    pub fn from_bases(
        stream: &[PacketRecord],
        bases: &[usize],
        window: usize,
        horizon: usize,
        vis: Visibility,
    ) -> Self {
        let samples = bases
            .iter()
            .filter(|&&b| b < stream.len())
            .map(|&b| Sample {
                window: build_window(stream, b, window, vis),
                targets: targets_after(stream, b, horizon),
                prev: last_acked_at_or_before(stream, b),
            })
            .collect();
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub loss: LossConfig,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 32,
            schedule: LrSchedule::default(),
            loss: LossConfig::default(),
            dropout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            steps: 100,
            batch_size: 32,
            lr: 1e-3,
            loss: LossConfig::default(),
            dropout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Inference-mode loss of the starting parameters on the dataset.
    pub initial_loss: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Model-space targets, loss weights and normalizer for one sample, or
/// `None` when no target is ACKed.
fn sample_targets(params: &ModelParams, s: &Sample, loss: &LossConfig) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let weights = change_point_weights(&s.targets, s.prev, loss);
    let valid = s.targets.iter().filter(|t| t.is_some()).count();
    if valid == 0 {
        return None;
    }
    let z = s
        .targets
        .iter()
        .map(|t| t.map_or(0.0, |v| params.norm.latency_to_model(v)))
        .collect();
    Some((z, weights, valid as f64))
}

fn check_horizon(params: &ModelParams, data: &Dataset) -> Result<(), PredictorError> {
    if let Some(s) = data.samples.iter().find(|s| s.targets.len() != params.config.horizon) {
        return Err(PredictorError::Shape(format!(
            "sample has {} targets, model horizon is {}",
            s.targets.len(),
            params.config.horizon
        )));
    }
    Ok(())
}

/// Mean change-point loss (model space) over a dataset, dropout off.
pub fn mean_loss(params: &ModelParams, data: &Dataset, loss: &LossConfig) -> Result<f64, PredictorError> {
    check_horizon(params, data)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for s in &data.samples {
        let Some((z, w, norm)) = sample_targets(params, s, loss) else {
            continue;
        };
        let mut g = Graph::new();
        let out = params.forward(&mut g, s.window.to_matrix(&params.norm), None, 0.0)?;
        let l = g.weighted_sse(out, &z, &w, norm)?;
        total += g.value(l)[0];
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn grad_norm(params: &ModelParams) -> f64 {
    params
        .params
        .blocks
        .iter()
        .filter_map(|b| b.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Pre-train all parameters with Adam and the warmup schedule.
pub fn train(
    mut params: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), PredictorError> {
    cfg.loss.check()?;
    check_horizon(&params, data)?;
    if cfg.batch_size == 0 {
        return Err(PredictorError::Config("batch_size must be >= 1".into()));
    }
    let initial_loss = mean_loss(&params, data, &cfg.loss)?;
    let mut report = TrainReport {
        initial_loss,
        epoch_losses: Vec::new(),
        steps: 0,
    };
    if cfg.epochs == 0 || data.is_empty() {
        return Ok((params, report));
    }
    let mut adam = AdamState::new(&params.params.blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            params.params.zero_grad();
            let mut used = 0usize;
            for &i in batch {
                let s = &data.samples[i];
                let Some((z, w, norm)) = sample_targets(&params, s, &cfg.loss) else {
                    continue;
                };
                let mut g = Graph::new();
                let out = params.forward(&mut g, s.window.to_matrix(&params.norm), Some(&mut rng), cfg.dropout)?;
                let l = g.weighted_sse(out, &z, &w, norm)?;
                let value = g.value(l)[0];
                let lr = lr_at(&cfg.schedule, report.steps.max(1))?;
                if !value.is_finite() {
                    return Err(PredictorError::NonFinite(format!(
                        "loss {value} at step {} (lr {lr:.3e}, grad norm {:.3e})",
                        report.steps + 1,
                        grad_norm(&params)
                    )));
                }
                g.backward(l)?;
                g.accumulate_into(&mut params.params);
                epoch_total += value;
                epoch_n += 1;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            for b in &mut params.params.blocks {
                if let Some(gr) = b.grad.as_mut() {
                    gr.iter_mut().for_each(|x| *x *= scale);
                }
            }
            report.steps += 1;
            let lr = lr_at(&cfg.schedule, report.steps)?;
            adam_step(&mut params.params.blocks, &mut adam, lr).map_err(|e| {
                PredictorError::NonFinite(format!(
                    "{e} at step {} (lr {lr:.3e}, grad norm {:.3e})",
                    report.steps,
                    grad_norm(&params)
                ))
            })?;
        }
        report
            .epoch_losses
            .push(if epoch_n == 0 { 0.0 } else { epoch_total / epoch_n as f64 });
    }
    params.params.zero_grad();
    Ok((params, report))
}

/// Update only the two output linear layers. Encoder outputs are computed
/// once (inference mode) and reused for every step.
pub fn fine_tune(mut params: ModelParams, recent: &Dataset, cfg: &FineTuneConfig) -> Result<ModelParams, PredictorError> {
    cfg.loss.check()?;
    check_horizon(&params, recent)?;
    if cfg.steps == 0 {
        return Ok(params);
    }
    if recent.is_empty() {
        return Err(PredictorError::Config("fine-tuning needs at least one window".into()));
    }
    let head_start = params
        .params
        .index_of(HEAD_BLOCKS[0])
        .ok_or_else(|| PredictorError::Config("model has no output head".into()))?;
    let head_end = head_start + HEAD_BLOCKS.len();
    if head_end != params.params.blocks.len() {
        return Err(PredictorError::Config("output head must be the last parameter blocks".into()));
    }
    let mut cached = Vec::with_capacity(recent.len());
    for s in &recent.samples {
        if let Some(t) = sample_targets(&params, s, &cfg.loss) {
            cached.push((params.embed(&s.window)?, t));
        }
    }
    if cached.is_empty() {
        return Err(PredictorError::Config("no fine-tuning window has an ACKed target".into()));
    }
    let mut adam = AdamState::new(&params.params.blocks[head_start..head_end]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cached.len()).collect();
    let mut cursor = order.len();
    let d = params.config.d_model;
    for step in 1..=cfg.steps {
        params.params.zero_grad();
        let mut used = 0usize;
        while used < cfg.batch_size.min(cached.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (emb, (z, w, norm)) = &cached[order[cursor]];
            cursor += 1;
            let mut g = Graph::new();
            let pooled = g.input(1, d, emb.clone())?;
            let out = params.head(&mut g, pooled, Some(&mut rng), cfg.dropout)?;
            let l = g.weighted_sse(out, z, w, *norm)?;
            if !g.value(l)[0].is_finite() {
                return Err(PredictorError::NonFinite(format!(
                    "fine-tune loss at step {step} (lr {:.3e}, grad norm {:.3e})",
                    cfg.lr,
                    grad_norm(&params)
                )));
            }
            g.backward(l)?;
            g.accumulate_into(&mut params.params);
            used += 1;
        }
        let scale = 1.0 / used as f64;
        for b in &mut params.params.blocks[head_start..head_end] {
            if let Some(gr) = b.grad.as_mut() {
                gr.iter_mut().for_each(|x| *x *= scale);
            }
        }
        adam_step(&mut params.params.blocks[head_start..head_end], &mut adam, cfg.lr)?;
    }
    params.params.zero_grad();
    Ok(params)
}
