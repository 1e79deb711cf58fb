//! The encoder-only latency predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{ContextWindow, NormStats, N_FEATURES};
use super::PredictorError;
use crate::tensor_nn::{Graph, ParamSet, Tensor2D, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub n_features: usize,
    pub horizon: usize,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_width: 256,
            n_features: N_FEATURES,
            horizon: 8,
            window: 334,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<(), PredictorError> {
        let ok = self.d_model > 0
            && self.heads > 0
            && self.d_model % self.heads == 0
            && self.layers > 0
            && self.ff_width > 0
            && self.n_features == N_FEATURES
            && self.horizon > 0
            && self.window > 0;
        if ok {
            Ok(())
        } else {
            Err(PredictorError::Config(format!("invalid model configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
}

/// Weights, normalization statistics and architecture of one predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub norm: NormStats,
}

/// Names of the output-head blocks (the only blocks fine-tuning may change).
pub const HEAD_BLOCKS: [&str; 4] = ["head.w1", "head.b1", "head.w2", "head.b2"];

fn xavier(rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Tensor2D {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Tensor2D::from_vec(name, fan_in, fan_out, data)
}

fn constant(name: &str, cols: usize, value: f64) -> Tensor2D {
    Tensor2D::from_vec(name, 1, cols, vec![value; cols])
}

/// Block layout in checkpoint order.
pub fn block_layout(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("input.w".to_string(), cfg.n_features, d),
        ("input.b".to_string(), 1, d),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("enc{l}.{s}");
        for (n, r, c) in [
            ("wq", d, d),
            ("bq", 1, d),
            ("wk", d, d),
            ("bk", 1, d),
            ("wv", d, d),
            ("bv", 1, d),
            ("wo", d, d),
            ("bo", 1, d),
            ("ln1.g", 1, d),
            ("ln1.b", 1, d),
            ("ff1.w", d, cfg.ff_width),
            ("ff1.b", 1, cfg.ff_width),
            ("ff2.w", cfg.ff_width, d),
            ("ff2.b", 1, d),
            ("ln2.g", 1, d),
            ("ln2.b", 1, d),
        ] {
            out.push((p(n), r, c));
        }
    }
    out.push(("head.w1".into(), d, d));
    out.push(("head.b1".into(), 1, d));
    out.push(("head.w2".into(), d, cfg.horizon));
    out.push(("head.b2".into(), 1, cfg.horizon));
    out
}

impl ModelParams {
    pub fn init(config: ModelConfig, norm: NormStats, seed: u64) -> Result<Self, PredictorError> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        for (name, rows, cols) in block_layout(&config) {
            let t = if rows == 1 {
                let v = if name.ends_with(".g") { 1.0 } else { 0.0 };
                constant(&name, cols, v)
            } else {
                xavier(&mut rng, &name, rows, cols)
            };
            params.push(t);
        }
        Ok(ModelParams { config, params, norm })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn idx(&self, name: &str) -> usize {
        self.params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter block {name} missing"))
    }

    fn layer(&self, l: usize) -> LayerIdx {
        let i = |s: &str| self.idx(&format!("enc{l}.{s}"));
        LayerIdx {
            wq: i("wq"),
            bq: i("bq"),
            wk: i("wk"),
            bk: i("bk"),
            wv: i("wv"),
            bv: i("bv"),
            wo: i("wo"),
            bo: i("bo"),
            ln1_g: i("ln1.g"),
            ln1_b: i("ln1.b"),
            ff1_w: i("ff1.w"),
            ff1_b: i("ff1.b"),
            ff2_w: i("ff2.w"),
            ff2_b: i("ff2.b"),
            ln2_g: i("ln2.g"),
            ln2_b: i("ln2.b"),
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, w: usize, b: usize) -> Result<Var, PredictorError> {
        let wv = g.param(&self.params, w);
        let bv = g.param(&self.params, b);
        let y = g.matmul(x, wv)?;
        Ok(g.add_bias(y, bv)?)
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>, p: f64) -> Result<Var, PredictorError> {
        match rng {
            Some(r) => Ok(g.dropout(x, p, r)?),
            None => Ok(x),
        }
    }

    /// Encoder stack over a `W × F` normalized input. Returns the final
    /// representation of the last (most recent) token, `1 × d_model`. The
    /// last layer only computes the query for that token.
    pub fn encode(
        &self,
        g: &mut Graph,
        input: Vec<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
        dropout: f64,
    ) -> Result<Var, PredictorError> {
        let cfg = &self.config;
        if input.len() != cfg.window * cfg.n_features {
            return Err(PredictorError::Shape(format!(
                "window has {} values, model expects {} x {}",
                input.len(),
                cfg.window,
                cfg.n_features
            )));
        }
        let x0 = g.input(cfg.window, cfg.n_features, input)?;
        let mut x = self.linear(g, x0, self.idx("input.w"), self.idx("input.b"))?;
        let last = cfg.window - 1;
        for l in 0..cfg.layers {
            let li = self.layer(l);
            let final_layer = l + 1 == cfg.layers;
            let query_src = if final_layer { g.select_row(x, last)? } else { x };
            let q = self.linear(g, query_src, li.wq, li.bq)?;
            let k = self.linear(g, x, li.wk, li.bk)?;
            let v = self.linear(g, x, li.wv, li.bv)?;
            let a = g.attention(q, k, v, cfg.heads)?;
            let a = self.linear(g, a, li.wo, li.bo)?;
            let a = self.maybe_dropout(g, a, rng.as_deref_mut(), dropout)?;
            let r = g.add(query_src, a)?;
            let gamma = g.param(&self.params, li.ln1_g);
            let beta = g.param(&self.params, li.ln1_b);
            let h = g.layer_norm(r, gamma, beta)?;
            let f = self.linear(g, h, li.ff1_w, li.ff1_b)?;
            let f = g.relu(f);
            let f = self.linear(g, f, li.ff2_w, li.ff2_b)?;
            let f = self.maybe_dropout(g, f, rng.as_deref_mut(), dropout)?;
            let r = g.add(h, f)?;
            let gamma = g.param(&self.params, li.ln2_g);
            let beta = g.param(&self.params, li.ln2_b);
            x = g.layer_norm(r, gamma, beta)?;
        }
        Ok(x)
    }

    /// Output head over a pooled `1 × d_model` representation; returns
    /// `1 × B` normalized latencies.
    pub fn head(
        &self,
        g: &mut Graph,
        pooled: Var,
        rng: Option<&mut ChaCha8Rng>,
        dropout: f64,
    ) -> Result<Var, PredictorError> {
        let h = self.linear(g, pooled, self.idx("head.w1"), self.idx("head.b1"))?;
        let h = g.relu(h);
        let h = self.maybe_dropout(g, h, rng, dropout)?;
        self.linear(g, h, self.idx("head.w2"), self.idx("head.b2"))
    }

    /// Full forward pass; with `rng` the dropout layers are active.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: Vec<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
        dropout: f64,
    ) -> Result<Var, PredictorError> {
        let pooled = self.encode(g, input, rng.as_deref_mut(), dropout)?;
        self.head(g, pooled, rng, dropout)
    }

    fn check_window(&self, window: &ContextWindow) -> Result<(), PredictorError> {
        if window.len() != self.config.window {
            return Err(PredictorError::Shape(format!(
                "window length {} != model window {}",
                window.len(),
                self.config.window
            )));
        }
        Ok(())
    }

    /// Pooled final-encoder features of one window (inference mode).
    pub fn embed(&self, window: &ContextWindow) -> Result<Vec<f64>, PredictorError> {
        self.check_window(window)?;
        let mut g = Graph::new();
        let pooled = self.encode(&mut g, window.to_matrix(&self.norm), None, 0.0)?;
        Ok(g.value(pooled).to_vec())
    }

    /// Head output in milliseconds for a pooled embedding.
    pub fn predict_from_embedding(&self, pooled: &[f64]) -> Result<Vec<f64>, PredictorError> {
        let mut g = Graph::new();
        let p = g.input(1, self.config.d_model, pooled.to_vec())?;
        let out = self.head(&mut g, p, None, 0.0)?;
        Ok(g.value(out).iter().map(|z| self.norm.latency_from_model(*z)).collect())
    }
}

/// The next `B` latencies predicted after a window's last packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    pub base_index: usize,
    pub horizon: usize,
    pub predicted_latency_ms: Vec<f64>,
}

/// Inference-mode prediction, de-normalized to milliseconds.
pub fn predict(params: &ModelParams, window: &ContextWindow, base_index: usize) -> Result<PredictionBatch, PredictorError> {
    params.check_window(window)?;
    let mut g = Graph::new();
    let out = params.forward(&mut g, window.to_matrix(&params.norm), None, 0.0)?;
    let predicted: Vec<f64> = g.value(out).iter().map(|z| params.norm.latency_from_model(*z)).collect();
    if predicted.iter().any(|p| !p.is_finite()) {
        return Err(PredictorError::NonFinite("prediction is not finite".into()));
    }
    Ok(PredictionBatch {
        base_index,
        horizon: params.config.horizon,
        predicted_latency_ms: predicted,
    })
}
