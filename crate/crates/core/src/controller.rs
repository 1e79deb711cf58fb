//! Closed-loop per-packet queue selection driven by batched latency
//! predictions.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::baselines::LatencyPredictor;
use crate::netsim::QueueSelector;
use crate::predictor::{build_window, PredictionBatch, Visibility};
use crate::trace_model::{Direction, PacketRecord, QueueMark, SharpChangeThresholds};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("invalid selector configuration: {0}")]
    Config(String),
    #[error("packet {0} is already in flight")]
    Duplicate(u64),
    #[error("ACK for unknown packet {0}")]
    UnknownSeq(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub horizon: usize,
    pub thresholds: SharpChangeThresholds,
    pub hysteresis_pkts: usize,
    pub inference_budget_pkts: usize,
    pub pending_cap: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            horizon: 8,
            thresholds: SharpChangeThresholds::default(),
            hysteresis_pkts: 4,
            inference_budget_pkts: 3,
            pending_cap: 8,
        }
    }
}

impl SelectorConfig {
    pub fn check(&self) -> Result<(), ControllerError> {
        if self.horizon == 0 || self.hysteresis_pkts == 0 || self.pending_cap == 0 {
            return Err(ControllerError::Config(
                "horizon, hysteresis_pkts and pending_cap must be >= 1".into(),
            ));
        }
        if self.inference_budget_pkts >= self.horizon {
            return Err(ControllerError::Config(format!(
                "inference budget {} must be below the horizon {}",
                self.inference_budget_pkts, self.horizon
            )));
        }
        self.thresholds.check().map_err(ControllerError::Config)
    }

    /// Packets between consecutive inferences so that every packet is
    /// covered by a prediction that meets the deadline.
    pub fn decision_stride(&self) -> usize {
        (self.horizon + 1 - self.inference_budget_pkts.max(1)).max(1)
    }
}

/// Sent-but-unACKed packets and the queue each was assigned to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PendingLedger {
    l4s: usize,
    classic: usize,
    inflight: BTreeMap<u64, QueueMark>,
}

impl PendingLedger {
    pub fn on_send(&mut self, seq: u64, mark: QueueMark) -> Result<(), ControllerError> {
        if self.inflight.contains_key(&seq) {
            return Err(ControllerError::Duplicate(seq));
        }
        self.inflight.insert(seq, mark);
        match mark {
            QueueMark::L4S => self.l4s += 1,
            QueueMark::Classic => self.classic += 1,
        }
        Ok(())
    }

    pub fn on_ack(&mut self, seq: u64) -> Result<QueueMark, ControllerError> {
        let mark = self.inflight.remove(&seq).ok_or(ControllerError::UnknownSeq(seq))?;
        match mark {
            QueueMark::L4S => self.l4s -= 1,
            QueueMark::Classic => self.classic -= 1,
        }
        Ok(mark)
    }

    pub fn pending(&self, mark: QueueMark) -> usize {
        match mark {
            QueueMark::L4S => self.l4s,
            QueueMark::Classic => self.classic,
        }
    }

    pub fn len(&self) -> usize {
        self.inflight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inflight.is_empty()
    }

    pub fn contains(&self, seq: u64) -> bool {
        self.inflight.contains_key(&seq)
    }

    /// Counts agree with the per-packet map.
    pub fn is_consistent(&self) -> bool {
        let c = self.inflight.values().filter(|m| **m == QueueMark::Classic).count();
        c == self.classic && self.inflight.len() - c == self.l4s
    }
}

pub fn on_ack(ledger: &mut PendingLedger, seq: u64) -> Result<QueueMark, ControllerError> {
    ledger.on_ack(seq)
}

/// A prediction made after packet `decision_idx` may drive packet
/// `send_idx` only if it leaves at least the inference budget.
pub fn deadline_check(decision_idx: usize, send_idx: usize, cfg: &SelectorConfig) -> bool {
    send_idx >= decision_idx && send_idx - decision_idx >= cfg.inference_budget_pkts
}

/// Marks for the `B` packets after `pred.base_index`. A packet goes to the
/// Classic queue when its predicted latency is a sharp increase over the
/// previous packet's latency (the last ACKed latency for the first packet,
/// the previous prediction after that) and fewer than `pending_cap`
/// Classic packets are outstanding. At most one Classic run starts per
/// horizon, and a run lasts at most `hysteresis_pkts` packets.
pub fn select_queues(
    pred: &PredictionBatch,
    recent_acked_latencies: &[f64],
    ledger: &PendingLedger,
    cfg: &SelectorConfig,
) -> Vec<QueueMark> {
    let p = &pred.predicted_latency_ms;
    let mut prev = recent_acked_latencies.last().copied().or(p.first().copied()).unwrap_or(0.0);
    let mut out = Vec::with_capacity(p.len());
    let mut budget = cfg.pending_cap.saturating_sub(ledger.pending(QueueMark::Classic));
    let mut entered = false;
    let mut run = 0usize;
    for &x in p {
        let up = cfg.thresholds.classify(prev, x) == Some(Direction::Up);
        let continuing = run > 0 && run < cfg.hysteresis_pkts && x >= prev;
        let classic = budget > 0 && ((up && !entered) || continuing);
        if classic {
            entered = true;
            run += 1;
            budget -= 1;
            out.push(QueueMark::Classic);
        } else {
            run = 0;
            out.push(QueueMark::L4S);
        }
        prev = x;
    }
    out
}

/// Where a batched selector gets its predictions.
pub trait PredictionSource {
    /// Latencies of the `horizon` packets after `base`, or `None` to fall
    /// back to the default mark.
    fn predict(&mut self, stream: &[PacketRecord], base: usize, horizon: usize) -> Option<Vec<f64>>;
}

/// Predictions from a latency model over the live stream. Only ACKs that
/// have arrived are visible, so the window matches decision time.
pub struct ModelSource<'m> {
    pub model: &'m dyn LatencyPredictor,
    pub inferences: u64,
}

impl<'m> ModelSource<'m> {
    pub fn new(model: &'m dyn LatencyPredictor) -> Self {
        ModelSource { model, inferences: 0 }
    }
}

impl PredictionSource for ModelSource<'_> {
    fn predict(&mut self, stream: &[PacketRecord], base: usize, horizon: usize) -> Option<Vec<f64>> {
        if self.model.horizon() < horizon {
            return None;
        }
        let window = build_window(stream, base, self.model.window(), Visibility::AsRecorded);
        self.inferences += 1;
        self.model.predict_window(&window).ok()
    }
}

/// True latencies of a recorded run, looked up by stream index.
pub struct OracleSource {
    pub recorded: Vec<Option<f64>>,
}

impl PredictionSource for OracleSource {
    fn predict(&mut self, _stream: &[PacketRecord], base: usize, horizon: usize) -> Option<Vec<f64>> {
        let mut last = None;
        let mut out = Vec::with_capacity(horizon);
        if base + horizon >= self.recorded.len() {
            return None;
        }
        for i in base + 1..=base + horizon {
            let v = self.recorded[i].or(last)?;
            last = Some(v);
            out.push(v);
        }
        Some(out)
    }
}

/// Counters of one closed-loop run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorStats {
    pub decisions: u64,
    pub inferences: u64,
    pub classic_marked: u64,
    pub deadline_fallbacks: u64,
    pub guard_blocked: u64,
}

/// The closed-loop selector. Every `decision_stride` packets it asks the
/// source for the next `B` latencies and plans marks for the packets that
/// meet the deadline; unplanned packets get the default L4S mark. With
/// `guard` set, a Classic mark also requires the most recently ACKed
/// Classic-queue packet to have seen less latency than predicted.
pub struct BatchedSelector<S: PredictionSource> {
    pub cfg: SelectorConfig,
    pub source: S,
    pub guard: bool,
    pub ledger: PendingLedger,
    pub stats: SelectorStats,
    plan: BTreeMap<usize, QueueMark>,
    next_decision: usize,
    pending_mark: Option<(usize, QueueMark)>,
    recent_l4s: VecDeque<f64>,
    last_classic: Option<f64>,
}

const RECENT: usize = 16;

impl<S: PredictionSource> BatchedSelector<S> {
    pub fn new(cfg: SelectorConfig, source: S, guard: bool) -> Result<Self, ControllerError> {
        cfg.check()?;
        Ok(BatchedSelector {
            cfg,
            source,
            guard,
            ledger: PendingLedger::default(),
            stats: SelectorStats::default(),
            plan: BTreeMap::new(),
            next_decision: 0,
            pending_mark: None,
            recent_l4s: VecDeque::with_capacity(RECENT),
            last_classic: None,
        })
    }

    fn decide(&mut self, history: &[PacketRecord]) {
        let Some(base) = history.len().checked_sub(1) else {
            return;
        };
        let b = self.cfg.horizon;
        let Some(pred) = self.source.predict(history, base, b) else {
            return;
        };
        self.stats.inferences += 1;
        let batch = PredictionBatch {
            base_index: base,
            horizon: b,
            predicted_latency_ms: pred[..b].to_vec(),
        };
        let recent: Vec<f64> = self.recent_l4s.iter().copied().collect();
        let marks = select_queues(&batch, &recent, &self.ledger, &self.cfg);
        for (j, mark) in marks.into_iter().enumerate() {
            let idx = base + 1 + j;
            if !deadline_check(base, idx, &self.cfg) {
                if mark == QueueMark::Classic {
                    self.stats.deadline_fallbacks += 1;
                }
                continue;
            }
            let mark = if mark == QueueMark::Classic
                && self.guard
                && self.last_classic.is_some_and(|c| c >= batch.predicted_latency_ms[j])
            {
                self.stats.guard_blocked += 1;
                QueueMark::L4S
            } else {
                mark
            };
            self.plan.insert(idx, mark);
        }
    }
}

impl<S: PredictionSource> QueueSelector for BatchedSelector<S> {
    fn select(&mut self, history: &[PacketRecord], _now_ms: f64) -> QueueMark {
        let idx = history.len();
        if idx >= self.next_decision {
            self.decide(history);
            self.next_decision = idx + self.cfg.decision_stride();
        }
        while self.plan.first_key_value().is_some_and(|(k, _)| *k < idx) {
            self.plan.pop_first();
        }
        let mut mark = self.plan.remove(&idx).unwrap_or(QueueMark::L4S);
        if mark == QueueMark::Classic && self.ledger.pending(QueueMark::Classic) >= self.cfg.pending_cap {
            mark = QueueMark::L4S;
        }
        self.stats.decisions += 1;
        if mark == QueueMark::Classic {
            self.stats.classic_marked += 1;
        }
        self.pending_mark = Some((idx, mark));
        mark
    }

    fn on_sent(&mut self, stream: &[PacketRecord], _now_ms: f64) {
        let idx = stream.len() - 1;
        if let Some((i, mark)) = self.pending_mark.take() {
            if i == idx {
                self.ledger
                    .on_send(idx as u64, mark)
                    .expect("stream indices are unique");
            }
        }
    }

    fn on_feedback(&mut self, stream: &[PacketRecord], index: usize, lost: bool, _now_ms: f64) {
        let rec = &stream[index];
        if !lost {
            if let Some(l) = rec.latency_ms {
                match rec.queue_mark {
                    QueueMark::Classic => self.last_classic = Some(l),
                    QueueMark::L4S => {
                        if self.recent_l4s.len() == RECENT {
                            self.recent_l4s.pop_front();
                        }
                        self.recent_l4s.push_back(l);
                    }
                }
            }
        }
        if self.ledger.contains(index as u64) {
            self.ledger.on_ack(index as u64).expect("checked");
        }
    }
}

/// Always the default L4S mark.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultSelector;

impl QueueSelector for DefaultSelector {
    fn select(&mut self, _history: &[PacketRecord], _now_ms: f64) -> QueueMark {
        QueueMark::L4S
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(p: &[f64]) -> PredictionBatch {
        PredictionBatch {
            base_index: 0,
            horizon: p.len(),
            predicted_latency_ms: p.to_vec(),
        }
    }

    use QueueMark::{Classic as C, L4S as L};

    #[test]
    fn select_examples() {
        let cfg = SelectorConfig::default();
        let ledger = PendingLedger::default();
        assert_eq!(select_queues(&batch(&[25.0, 25.0, 60.0, 25.0]), &[25.0], &ledger, &cfg), vec![L, L, C, L]);
        assert_eq!(select_queues(&batch(&[30.0; 8]), &[30.0], &ledger, &cfg), vec![L; 8]);
        let mut full = PendingLedger::default();
        for s in 0..cfg.pending_cap as u64 {
            full.on_send(s, C).unwrap();
        }
        assert_eq!(select_queues(&batch(&[25.0, 25.0, 60.0, 25.0]), &[25.0], &full, &cfg), vec![L; 4]);
    }

    #[test]
    fn one_classic_run_per_horizon() {
        let cfg = SelectorConfig::default();
        let marks = select_queues(
            &batch(&[20.0, 60.0, 20.0, 60.0, 20.0, 60.0, 60.0, 20.0]),
            &[20.0],
            &PendingLedger::default(),
            &cfg,
        );
        assert_eq!(marks, vec![L, C, L, L, L, L, L, L]);
        // A rising plateau keeps the run going for at most hysteresis_pkts.
        let marks = select_queues(&batch(&[20.0, 60.0, 61.0, 62.0, 63.0, 64.0, 65.0, 20.0]), &[20.0], &PendingLedger::default(), &cfg);
        assert_eq!(marks, vec![L, C, C, C, C, L, L, L]);
    }

    #[test]
    fn deadline_examples() {
        let cfg = SelectorConfig::default();
        assert!((12..=14).all(|i| deadline_check(8, i, &cfg)));
        assert!(!deadline_check(8, 9, &cfg));
        let zero = SelectorConfig {
            inference_budget_pkts: 0,
            ..cfg
        };
        assert!(deadline_check(8, 8, &zero) && deadline_check(8, 100, &zero));
        assert!(SelectorConfig { inference_budget_pkts: 8, ..cfg }.check().is_err());
        assert!(SelectorConfig { pending_cap: 0, ..cfg }.check().is_err());
        assert_eq!(cfg.decision_stride(), 6);
    }

    #[test]
    fn ledger_examples() {
        let mut l = PendingLedger::default();
        l.on_send(5, C).unwrap();
        assert_eq!(on_ack(&mut l, 5).unwrap(), C);
        assert!(l.is_empty());
        assert_eq!(on_ack(&mut l, 5), Err(ControllerError::UnknownSeq(5)));
        l.on_send(1, L).unwrap();
        assert_eq!(l.on_send(1, C), Err(ControllerError::Duplicate(1)));
        assert!(l.is_consistent());
    }

    proptest! {
        #[test]
        fn ledger_counts_match_recount(ops in prop::collection::vec((0u64..12, any::<bool>(), any::<bool>()), 0..200)) {
            let mut l = PendingLedger::default();
            let mut model: BTreeMap<u64, QueueMark> = BTreeMap::new();
            for (seq, send, classic) in ops {
                if send {
                    let mark = if classic { C } else { L };
                    let r = l.on_send(seq, mark);
                    prop_assert_eq!(r.is_ok(), !model.contains_key(&seq));
                    model.entry(seq).or_insert(mark);
                } else {
                    prop_assert_eq!(l.on_ack(seq).ok(), model.remove(&seq));
                }
                prop_assert!(l.is_consistent());
                prop_assert_eq!(l.pending(C), model.values().filter(|m| **m == C).count());
                prop_assert_eq!(l.pending(L), model.values().filter(|m| **m == L).count());
            }
        }

        #[test]
        fn selection_is_deterministic_and_capped(
            p in prop::collection::vec(1.0f64..200.0, 1..16),
            pending in 0usize..10,
            last in 1.0f64..200.0,
        ) {
            let cfg = SelectorConfig::default();
            let mut l = PendingLedger::default();
            for s in 0..pending as u64 {
                l.on_send(s, C).unwrap();
            }
            let a = select_queues(&batch(&p), &[last], &l, &cfg);
            prop_assert_eq!(&a, &select_queues(&batch(&p), &[last], &l, &cfg));
            let n = a.iter().filter(|m| **m == C).count();
            prop_assert!(n + pending.min(cfg.pending_cap) <= cfg.pending_cap.max(pending));
            prop_assert!(n <= cfg.hysteresis_pkts);
        }
    }

    #[test]
    fn oracle_source_fills_gaps() {
        let mut o = OracleSource {
            recorded: vec![Some(1.0), Some(2.0), None, Some(4.0)],
        };
        assert_eq!(o.predict(&[], 0, 3), Some(vec![2.0, 2.0, 4.0]));
        assert_eq!(o.predict(&[], 2, 3), None);
    }
}
