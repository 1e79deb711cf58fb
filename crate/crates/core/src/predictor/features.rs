//! Featurization of a packet stream into fixed-length context windows.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::trace_model::{PacketRecord, QueueMark};

pub const N_FEATURES: usize = 7;
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "latency_ms",
    "rel_timestamp_ms",
    "packet_size_bytes",
    "flow_id",
    "receiver_id",
    "queue_mark",
    "acked",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureRow {
    pub latency_ms: f64,
    /// Milliseconds since the first packet of the same flow in the window.
    pub rel_timestamp_ms: f64,
    pub packet_size_bytes: f64,
    pub flow_id: f64,
    pub receiver_id: f64,
    /// 1 for L4S, 0 for Classic.
    pub queue_mark: f64,
    pub acked: f64,
}

impl FeatureRow {
    pub fn as_array(&self) -> [f64; N_FEATURES] {
        [
            self.latency_ms,
            self.rel_timestamp_ms,
            self.packet_size_bytes,
            self.flow_id,
            self.receiver_id,
            self.queue_mark,
            self.acked,
        ]
    }
}

/// Which latencies the window may see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Visibility {
    /// The trace's own ACK status.
    AsRecorded,
    /// Only packets whose ACK would have reached the sender by the send time
    /// of the window's last packet (send + latency + return delay).
    DecisionTime { return_delay_ms: f64 },
}

/// `rows.len() == W`; the first `pad` rows are left padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub rows: Vec<FeatureRow>,
    pub pad: usize,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Latencies of the ACKed, non-padding rows, oldest first.
    pub fn acked_latencies(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows[self.pad..]
            .iter()
            .filter(|r| r.acked > 0.5)
            .map(|r| r.latency_ms)
    }

    /// Normalized `W × F` model input, row-major. Padding rows are all zero
    /// and un-ACKed rows carry latency 0 in model space.
    pub fn to_matrix(&self, norm: &NormStats) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * N_FEATURES];
        for (i, row) in self.rows.iter().enumerate().skip(self.pad) {
            let dst = &mut out[i * N_FEATURES..(i + 1) * N_FEATURES];
            let raw = row.as_array();
            for f in 0..N_FEATURES {
                dst[f] = norm.apply(f, raw[f]);
            }
            if row.acked < 0.5 {
                dst[0] = 0.0;
            }
        }
        out
    }
}

/// Per-feature standardization. Binary features (queue mark, acked) keep
/// mean 0 and std 1 so they pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let vals: Vec<f64> = values.collect();
    for v in &vals {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    for v in &vals {
        sq += (v - mean) * (v - mean);
    }
    let std = (sq / n as f64).sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl NormStats {
    /// Fit on a training split. Latency statistics use ACKed records only;
    /// relative timestamps are measured on windows sampled every `stride`
    /// bases.
    pub fn fit(split: &[PacketRecord], window: usize, stride: usize) -> Self {
        let mut s = NormStats::default();
        (s.mean[0], s.std[0]) = mean_std(split.iter().filter_map(|r| r.latency_ms));
        (s.mean[2], s.std[2]) = mean_std(split.iter().map(|r| r.packet_size_bytes as f64));
        (s.mean[3], s.std[3]) = mean_std(split.iter().map(|r| r.flow_id as f64));
        (s.mean[4], s.std[4]) = mean_std(split.iter().map(|r| r.receiver_id as f64));
        let mut rel = Vec::new();
        if window > 0 && split.len() >= window {
            let mut base = window - 1;
            while base < split.len() {
                let w = build_window(split, base, window, Visibility::AsRecorded);
                rel.extend(w.rows[w.pad..].iter().map(|r| r.rel_timestamp_ms));
                base += stride.max(1);
            }
        }
        (s.mean[1], s.std[1]) = mean_std(rel.into_iter());
        s
    }

    pub fn apply(&self, feature: usize, value: f64) -> f64 {
        (value - self.mean[feature]) / self.std[feature]
    }

    pub fn latency_to_model(&self, ms: f64) -> f64 {
        self.apply(0, ms)
    }

    pub fn latency_from_model(&self, z: f64) -> f64 {
        z * self.std[0] + self.mean[0]
    }
}

/// The window ending at `base` (inclusive), `len` rows, left-padded when the
/// stream is shorter.
pub fn build_window(stream: &[PacketRecord], base: usize, len: usize, vis: Visibility) -> ContextWindow {
    let start = (base + 1).saturating_sub(len);
    let slice = &stream[start..=base];
    let pad = len - slice.len();
    let now = stream[base].send_time_ms;
    let mut first: HashMap<u32, f64> = HashMap::new();
    let mut rows = vec![FeatureRow::default(); pad];
    rows.reserve(slice.len());
    for r in slice {
        let t0 = *first.entry(r.flow_id).or_insert(r.send_time_ms);
        let latency = match (vis, r.latency_ms) {
            (_, None) => None,
            (Visibility::AsRecorded, Some(l)) => Some(l),
            (Visibility::DecisionTime { return_delay_ms }, Some(l)) => {
                (r.send_time_ms + l + return_delay_ms <= now).then_some(l)
            }
        };
        rows.push(FeatureRow {
            latency_ms: latency.unwrap_or(0.0),
            rel_timestamp_ms: r.send_time_ms - t0,
            packet_size_bytes: r.packet_size_bytes as f64,
            flow_id: r.flow_id as f64,
            receiver_id: r.receiver_id as f64,
            queue_mark: if r.queue_mark == QueueMark::L4S { 1.0 } else { 0.0 },
            acked: latency.is_some() as u8 as f64,
        });
    }
    ContextWindow { rows, pad }
}

/// The next `horizon` latencies after `base`; `None` where not ACKed.
pub fn targets_after(stream: &[PacketRecord], base: usize, horizon: usize) -> Vec<Option<f64>> {
    (1..=horizon)
        .map(|i| stream.get(base + i).and_then(|r| r.latency_ms))
        .collect()
}

/// Most recent ACKed latency at or before `base`.
pub fn last_acked_at_or_before(stream: &[PacketRecord], base: usize) -> Option<f64> {
    stream[..=base].iter().rev().find_map(|r| r.latency_ms)
}

/// Lazily materialized sliding windows over a stream: one window per base
/// index with a full `window` of history and `horizon` packets after it.
#[derive(Debug, Clone, Copy)]
pub struct Featurizer<'a> {
    pub stream: &'a [PacketRecord],
    pub window: usize,
    pub horizon: usize,
    pub visibility: Visibility,
}

impl<'a> Featurizer<'a> {
    pub fn new(stream: &'a [PacketRecord], window: usize, horizon: usize, visibility: Visibility) -> Self {
        Featurizer {
            stream,
            window,
            horizon,
            visibility,
        }
    }

    /// Number of windows: `len − W − B + 1`, or 0 when the stream is shorter
    /// than `W + B`.
    pub fn len(&self) -> usize {
        (self.stream.len() + 1).saturating_sub(self.window + self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Base (last observed) stream index of window `i`.
    pub fn base(&self, i: usize) -> usize {
        i + self.window - 1
    }

    pub fn get(&self, i: usize) -> (ContextWindow, Vec<Option<f64>>) {
        let base = self.base(i);
        (
            build_window(self.stream, base, self.window, self.visibility),
            targets_after(self.stream, base, self.horizon),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (ContextWindow, Vec<Option<f64>>)> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Convenience wrapper: all windows of a stream, materialized.
pub fn featurize(
    stream: &[PacketRecord],
    window: usize,
    horizon: usize,
    visibility: Visibility,
) -> Vec<(ContextWindow, Vec<Option<f64>>)> {
    Featurizer::new(stream, window, horizon, visibility).iter().collect()
}
