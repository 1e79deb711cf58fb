use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::trace_model::{detect_sharp_changes, PacketRecord, SharpChangeEvent, SharpChangeThresholds};

/// Precision, recall and F1 of predicted sharp changes. Precision is 1 when
/// nothing was predicted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChangeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_count: usize,
    pub predicted_count: usize,
    pub matched_count: usize,
}

impl ChangeScore {
    pub fn from_counts(true_count: usize, predicted_count: usize, matched_count: usize) -> Self {
        let precision = if predicted_count == 0 {
            1.0
        } else {
            matched_count as f64 / predicted_count as f64
        };
        let recall = if true_count == 0 {
            0.0
        } else {
            matched_count as f64 / true_count as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ChangeScore {
            precision,
            recall,
            f1,
            true_count,
            predicted_count,
            matched_count,
        }
    }

    /// Pool the counts of several scores.
    pub fn merge(scores: &[ChangeScore]) -> Self {
        let t = scores.iter().map(|s| s.true_count).sum();
        let p = scores.iter().map(|s| s.predicted_count).sum();
        let m = scores.iter().map(|s| s.matched_count).sum();
        ChangeScore::from_counts(t, p, m)
    }
}

/// Match predicted to true events: same direction and index within
/// `slack`. Each event is used at most once; events are paired greedily in
/// index order.
pub fn match_events(truth: &[SharpChangeEvent], pred: &[SharpChangeEvent], slack: usize) -> usize {
    let mut used = vec![false; truth.len()];
    let mut matched = 0;
    let mut lo = 0;
    for p in pred {
        while lo < truth.len() && truth[lo].index + slack < p.index {
            lo += 1;
        }
        let mut j = lo;
        while j < truth.len() && truth[j].index <= p.index + slack {
            if !used[j] && truth[j].direction == p.direction {
                used[j] = true;
                matched += 1;
                break;
            }
            j += 1;
        }
    }
    matched
}

pub fn score_changes_with_slack(
    truth: &[f64],
    pred: &[f64],
    thresholds: &SharpChangeThresholds,
    slack: usize,
) -> Result<ChangeScore, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::Length(truth.len(), pred.len()));
    }
    let t = detect_sharp_changes(truth, thresholds);
    let p = detect_sharp_changes(pred, thresholds);
    let m = match_events(&t, &p, slack);
    Ok(ChangeScore::from_counts(t.len(), p.len(), m))
}

pub fn score_changes(truth: &[f64], pred: &[f64], thresholds: &SharpChangeThresholds) -> Result<ChangeScore, EvalError> {
    score_changes_with_slack(truth, pred, thresholds, 0)
}

/// Mean squared error over the indices where the true series has a sharp
/// change.
pub fn mse_on_sharp_changes(truth: &[f64], pred: &[f64], thresholds: &SharpChangeThresholds) -> Result<f64, EvalError> {
    let (sum, n) = sse_on_sharp_changes(truth, pred, thresholds)?;
    if n == 0 {
        return Err(EvalError::NoEvents);
    }
    Ok(sum / n as f64)
}

/// Sum of squared errors at true sharp changes and the number of them.
pub fn sse_on_sharp_changes(
    truth: &[f64],
    pred: &[f64],
    thresholds: &SharpChangeThresholds,
) -> Result<(f64, usize), EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::Length(truth.len(), pred.len()));
    }
    let events = detect_sharp_changes(truth, thresholds);
    let sum = events
        .iter()
        .map(|e| (pred[e.index] - truth[e.index]).powi(2))
        .sum();
    Ok((sum, events.len()))
}

/// Nearest-rank percentile: element `ceil(p/100 · n) − 1` of the sorted
/// values (index 0 for p = 0).
pub fn percentile(values: &[f64], p: f64) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(EvalError::Invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[nearest_rank(v.len(), p)])
}

fn nearest_rank(n: usize, p: f64) -> usize {
    let r = (p / 100.0 * n as f64).ceil() as usize;
    r.clamp(1, n) - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailStats {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub count: usize,
}

impl TailStats {
    pub fn from_values(values: &[f64]) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(TailStats {
            p50: v[nearest_rank(v.len(), 50.0)],
            p90: v[nearest_rank(v.len(), 90.0)],
            p99: v[nearest_rank(v.len(), 99.0)],
            count: v.len(),
        })
    }
}

/// Delivered latencies of the records passing `keep`.
pub fn delivered_latencies(records: &[PacketRecord], keep: &dyn Fn(&PacketRecord) -> bool) -> Vec<f64> {
    records.iter().filter(|r| keep(r)).filter_map(|r| r.latency_ms).collect()
}

pub fn reduction_pct(base: f64, treat: f64) -> f64 {
    100.0 * (base - treat) / base
}

/// `100 · (P99_base − P99_treat) / P99_base` over delivered latencies of
/// the records passing `keep`.
pub fn p99_reduction(
    base: &[PacketRecord],
    treat: &[PacketRecord],
    keep: &dyn Fn(&PacketRecord) -> bool,
) -> Result<f64, EvalError> {
    let b = percentile(&delivered_latencies(base, keep), 99.0)?;
    let t = percentile(&delivered_latencies(treat, keep), 99.0)?;
    Ok(reduction_pct(b, t))
}
