//! Offline scoring of a predictor over a packet stream.

use serde::{Deserialize, Serialize};

use super::metrics::{match_events, sse_on_sharp_changes, ChangeScore};
use super::EvalError;
use crate::baselines::LatencyPredictor;
use crate::predictor::{build_window, last_acked_at_or_before, Visibility};
use crate::trace_model::{detect_sharp_changes, PacketRecord, SharpChangeThresholds};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictorEval {
    pub score: ChangeScore,
    /// Sum of squared errors at true sharp changes and their count.
    pub sharp_sse: f64,
    pub sharp_count: usize,
    pub mse: f64,
    pub targets: usize,
}

impl PredictorEval {
    pub fn mse_on_sharp(&self) -> Option<f64> {
        (self.sharp_count > 0).then(|| self.sharp_sse / self.sharp_count as f64)
    }
}

/// `n_segments` evenly spaced segments of `segment_len` packets inside
/// `[start, end)`, each cut into consecutive batches of `horizon`. Returns
/// the base index of every batch. The covered target positions depend only
/// on the segments, so predictors with different horizons that divide
/// `segment_len` are scored on the same packets.
pub fn segment_bases(start: usize, end: usize, horizon: usize, n_segments: usize, segment_len: usize) -> Vec<usize> {
    if horizon == 0 || n_segments == 0 || end <= start + segment_len + 1 {
        return Vec::new();
    }
    let span = end - start - segment_len - 1;
    let mut out = Vec::new();
    for s in 0..n_segments {
        let seg = start + span * s / (n_segments - 1).max(1);
        let seg = seg.min(end - segment_len - 1);
        let mut b = seg;
        while b + horizon <= seg + segment_len {
            out.push(b);
            b += horizon;
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Predict from every base and score the resulting batches. Each batch is
/// scored on the series `[latency at base, target 1, …, target B]` against
/// `[latency at base, prediction 1, …, prediction B]`; positions without an
/// ACK are skipped in both. Counts are pooled over batches.
pub fn evaluate_predictor(
    stream: &[PacketRecord],
    predictor: &dyn LatencyPredictor,
    bases: &[usize],
    visibility: Visibility,
    thresholds: &SharpChangeThresholds,
    slack: usize,
) -> Result<PredictorEval, EvalError> {
    let (w, b) = (predictor.window(), predictor.horizon());
    let mut counts = (0usize, 0usize, 0usize);
    let mut out = PredictorEval::default();
    let mut sq = 0.0;
    for &base in bases {
        if base + b >= stream.len() {
            return Err(EvalError::Invalid(format!("base {base} + horizon {b} beyond stream end")));
        }
        let Some(anchor) = last_acked_at_or_before(stream, base) else {
            continue;
        };
        let window = build_window(stream, base, w, visibility);
        let pred = predictor.predict_window(&window).map_err(|e| EvalError::Predictor(e.to_string()))?;
        let mut t = vec![anchor];
        let mut p = vec![anchor];
        for (i, rec) in stream[base + 1..=base + b].iter().enumerate() {
            if let Some(l) = rec.latency_ms {
                t.push(l);
                p.push(pred[i]);
                sq += (pred[i] - l).powi(2);
                out.targets += 1;
            }
        }
        let te = detect_sharp_changes(&t, thresholds);
        let pe = detect_sharp_changes(&p, thresholds);
        counts.0 += te.len();
        counts.1 += pe.len();
        counts.2 += match_events(&te, &pe, slack);
        let (s, n) = sse_on_sharp_changes(&t, &p, thresholds)?;
        out.sharp_sse += s;
        out.sharp_count += n;
    }
    out.score = ChangeScore::from_counts(counts.0, counts.1, counts.2);
    out.mse = if out.targets == 0 { 0.0 } else { sq / out.targets as f64 };
    Ok(out)
}
