//! Simplified L4S dual-queue bottleneck.
//!
//! ECT packets go to the L4S queue and are CE-marked once the L4S backlog
//! reaches a fixed step threshold. Everything else goes to a tail-drop
//! classic queue. The link is shared between the two by a weighted fair
//! scheduler (no DualPI2 coupling).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::trace_model::QueueMark;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueState {
    pub l4s_occupancy_pkts: u32,
    pub classic_occupancy_pkts: u32,
    pub l4s_capacity_pkts: u32,
    pub classic_capacity_pkts: u32,
    pub ecn_mark_threshold_pkts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    EnqueuedL4S,
    EnqueuedClassic,
    DroppedTail,
    EnqueuedL4SWithCEMark,
}

/// Classify an arriving packet against the current occupancy. Step marking:
/// CE when the L4S backlog is at or above the threshold.
pub fn dual_queue_enqueue(state: &QueueState, mark: QueueMark) -> EnqueueOutcome {
    match mark {
        QueueMark::L4S => {
            if state.l4s_occupancy_pkts >= state.l4s_capacity_pkts {
                EnqueueOutcome::DroppedTail
            } else if state.l4s_occupancy_pkts >= state.ecn_mark_threshold_pkts {
                EnqueueOutcome::EnqueuedL4SWithCEMark
            } else {
                EnqueueOutcome::EnqueuedL4S
            }
        }
        QueueMark::Classic => {
            if state.classic_occupancy_pkts >= state.classic_capacity_pkts {
                EnqueueOutcome::DroppedTail
            } else {
                EnqueueOutcome::EnqueuedClassic
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueCounters {
    pub arrivals: u64,
    pub dequeued: u64,
    pub dropped: u64,
}

/// The two FIFOs plus the scheduler state. Generic over the queued item so the
/// engine can carry whatever per-packet bookkeeping it needs.
#[derive(Debug)]
pub struct DualQueue<P> {
    l4s: VecDeque<(u32, P)>,
    classic: VecDeque<(u32, P)>,
    state: QueueState,
    l4s_weight: f64,
    // Normalized service (bytes / weight) per queue, for weighted fair sharing.
    served: [f64; 2],
    pub l4s_counters: QueueCounters,
    pub classic_counters: QueueCounters,
}

impl<P> DualQueue<P> {
    pub fn new(capacity_pkts: u32, mark_threshold_pkts: u32, l4s_weight: f64) -> Self {
        DualQueue {
            l4s: VecDeque::new(),
            classic: VecDeque::new(),
            state: QueueState {
                l4s_occupancy_pkts: 0,
                classic_occupancy_pkts: 0,
                l4s_capacity_pkts: capacity_pkts,
                classic_capacity_pkts: capacity_pkts,
                ecn_mark_threshold_pkts: mark_threshold_pkts,
            },
            l4s_weight: l4s_weight.clamp(1e-6, 1.0 - 1e-6),
            served: [0.0; 2],
            l4s_counters: QueueCounters::default(),
            classic_counters: QueueCounters::default(),
        }
    }

    pub fn state(&self) -> &QueueState {
        &self.state
    }

    pub fn is_empty(&self) -> bool {
        self.l4s.is_empty() && self.classic.is_empty()
    }

    /// Offer a packet. Returns the outcome; dropped packets are handed back.
    pub fn enqueue(&mut self, mark: QueueMark, size: u32, pkt: P) -> (EnqueueOutcome, Option<P>) {
        let outcome = dual_queue_enqueue(&self.state, mark);
        match outcome {
            EnqueueOutcome::DroppedTail => {
                match mark {
                    QueueMark::L4S => {
                        self.l4s_counters.arrivals += 1;
                        self.l4s_counters.dropped += 1;
                    }
                    QueueMark::Classic => {
                        self.classic_counters.arrivals += 1;
                        self.classic_counters.dropped += 1;
                    }
                }
                return (outcome, Some(pkt));
            }
            EnqueueOutcome::EnqueuedL4S | EnqueueOutcome::EnqueuedL4SWithCEMark => {
                if self.l4s.is_empty() {
                    self.served[0] = self.served[0].max(self.served[1]);
                }
                self.l4s.push_back((size, pkt));
                self.state.l4s_occupancy_pkts += 1;
                self.l4s_counters.arrivals += 1;
            }
            EnqueueOutcome::EnqueuedClassic => {
                if self.classic.is_empty() {
                    self.served[1] = self.served[1].max(self.served[0]);
                }
                self.classic.push_back((size, pkt));
                self.state.classic_occupancy_pkts += 1;
                self.classic_counters.arrivals += 1;
            }
        }
        (outcome, None)
    }

    /// Pick the next packet to transmit.
    pub fn dequeue(&mut self) -> Option<(QueueMark, P)> {
        let pick_l4s = match (self.l4s.is_empty(), self.classic.is_empty()) {
            (true, true) => return None,
            (false, true) => true,
            (true, false) => false,
            (false, false) => self.served[0] <= self.served[1],
        };
        if pick_l4s {
            let (size, p) = self.l4s.pop_front().expect("non-empty");
            self.served[0] += size as f64 / self.l4s_weight;
            self.state.l4s_occupancy_pkts -= 1;
            self.l4s_counters.dequeued += 1;
            Some((QueueMark::L4S, p))
        } else {
            let (size, p) = self.classic.pop_front().expect("non-empty");
            self.served[1] += size as f64 / (1.0 - self.l4s_weight);
            self.state.classic_occupancy_pkts -= 1;
            self.classic_counters.dequeued += 1;
            Some((QueueMark::Classic, p))
        }
    }

    /// `arrivals == dequeued + dropped + resident` for both queues.
    pub fn conserved(&self) -> bool {
        let l = &self.l4s_counters;
        let c = &self.classic_counters;
        l.arrivals == l.dequeued + l.dropped + self.l4s.len() as u64
            && c.arrivals == c.dequeued + c.dropped + self.classic.len() as u64
            && self.state.l4s_occupancy_pkts as usize == self.l4s.len()
            && self.state.classic_occupancy_pkts as usize == self.classic.len()
    }
}
