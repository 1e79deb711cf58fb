//! Sender congestion control: DCTCP-style L4S, a cubic-growth AIMD, and a
//! BBR-like rate prober. Windows are in MSS-sized packets.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub const MSS_BYTES: u32 = 1500;
pub const MIN_CWND_PKTS: f64 = 1.0;
const MAX_CWND_PKTS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CcAlgorithm {
    DctcpL4S,
    CubicLike,
    BbrLike,
}

impl CcAlgorithm {
    /// Whether the flow marks its packets ECT and so lands in the L4S queue.
    pub fn is_ect(self) -> bool {
        matches!(self, CcAlgorithm::DctcpL4S)
    }
}

/// What the sender learned from one ACK.
#[derive(Debug, Clone, Copy)]
pub struct AckInfo {
    pub now_ms: f64,
    pub rtt_ms: f64,
    /// Sequence number acknowledged.
    pub seq: u64,
    /// One past the highest sequence number sent so far.
    pub next_seq: u64,
    pub ce: bool,
    pub inflight_pkts: usize,
    /// Whether the sender was using at least half its window; window growth
    /// is skipped for application-limited flows.
    pub cwnd_limited: bool,
    /// Delivery-rate sample in bytes per millisecond, when one is available.
    pub delivery_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcOutput {
    pub cwnd_pkts: f64,
    /// Bytes per millisecond; `None` means pace from the window.
    pub pacing_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Dctcp {
    pub cwnd: f64,
    pub ssthresh: f64,
    pub alpha: f64,
    pub gain: f64,
    acked_in_round: u32,
    ce_in_round: u32,
    round_end_seq: u64,
    recovery_seq: u64,
}

impl Dctcp {
    pub fn new(initial_cwnd: f64) -> Self {
        Dctcp {
            cwnd: initial_cwnd,
            ssthresh: f64::INFINITY,
            alpha: 1.0,
            gain: 1.0 / 16.0,
            acked_in_round: 0,
            ce_in_round: 0,
            round_end_seq: 0,
            recovery_seq: 0,
        }
    }

    /// Start directly in congestion avoidance.
    pub fn in_congestion_avoidance(cwnd: f64, alpha: f64) -> Self {
        Dctcp {
            ssthresh: cwnd,
            alpha,
            ..Dctcp::new(cwnd)
        }
    }

    fn slow_start(&self) -> bool {
        self.cwnd < self.ssthresh
    }

    fn on_ack(&mut self, ack: &AckInfo) {
        self.acked_in_round += 1;
        if ack.ce {
            self.ce_in_round += 1;
            if self.slow_start() {
                self.ssthresh = self.cwnd;
            }
        } else if self.slow_start() && ack.cwnd_limited {
            self.cwnd += 1.0;
        }
        if ack.seq >= self.round_end_seq {
            let frac = self.ce_in_round as f64 / self.acked_in_round.max(1) as f64;
            self.alpha = (1.0 - self.gain) * self.alpha + self.gain * frac;
            if self.ce_in_round > 0 {
                self.cwnd *= 1.0 - self.alpha / 2.0;
                self.ssthresh = self.cwnd;
            } else if !self.slow_start() && ack.cwnd_limited {
                self.cwnd += 1.0;
            }
            self.acked_in_round = 0;
            self.ce_in_round = 0;
            self.round_end_seq = ack.next_seq;
        }
        self.cwnd = self.cwnd.clamp(MIN_CWND_PKTS, MAX_CWND_PKTS);
    }

    fn on_loss(&mut self, seq: u64, next_seq: u64) {
        if seq < self.recovery_seq {
            return;
        }
        self.recovery_seq = next_seq;
        self.cwnd = (self.cwnd / 2.0).max(MIN_CWND_PKTS);
        self.ssthresh = self.cwnd;
    }
}

#[derive(Debug, Clone)]
pub struct Cubic {
    pub cwnd: f64,
    pub ssthresh: f64,
    pub w_max: f64,
    pub c: f64,
    pub beta: f64,
    k_s: f64,
    epoch_start_ms: Option<f64>,
    w_est: f64,
    recovery_seq: u64,
}

impl Cubic {
    pub fn new(initial_cwnd: f64) -> Self {
        Cubic {
            cwnd: initial_cwnd,
            ssthresh: f64::INFINITY,
            w_max: 0.0,
            c: 0.4,
            beta: 0.7,
            k_s: 0.0,
            epoch_start_ms: None,
            w_est: initial_cwnd,
            recovery_seq: 0,
        }
    }

    fn on_ack(&mut self, ack: &AckInfo) {
        if !ack.cwnd_limited {
            return;
        }
        if self.cwnd < self.ssthresh {
            self.cwnd += 1.0;
        } else {
            let epoch = *self.epoch_start_ms.get_or_insert_with(|| {
                self.w_est = self.cwnd;
                ack.now_ms
            });
            if self.w_max < self.cwnd {
                self.w_max = self.cwnd;
                self.k_s = 0.0;
            }
            let t = (ack.now_ms - epoch) / 1000.0;
            let target = self.c * (t - self.k_s).powi(3) + self.w_max;
            if target > self.cwnd {
                self.cwnd += (target - self.cwnd) / self.cwnd;
            } else {
                self.cwnd += 0.01 / self.cwnd;
            }
            // Reno-friendly region: AIMD(1, beta) equivalent growth.
            self.w_est += 3.0 * (1.0 - self.beta) / (1.0 + self.beta) / self.cwnd;
            if self.w_est > self.cwnd {
                self.cwnd = self.w_est;
            }
        }
        self.cwnd = self.cwnd.clamp(MIN_CWND_PKTS, MAX_CWND_PKTS);
    }

    fn on_loss(&mut self, now_ms: f64, seq: u64, next_seq: u64) {
        if seq < self.recovery_seq {
            return;
        }
        self.recovery_seq = next_seq;
        self.w_max = self.cwnd;
        self.cwnd = (self.cwnd * self.beta).max(MIN_CWND_PKTS);
        self.ssthresh = self.cwnd;
        self.k_s = (self.w_max * (1.0 - self.beta) / self.c).cbrt();
        self.epoch_start_ms = Some(now_ms);
        self.w_est = self.cwnd;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BbrMode {
    Startup,
    Drain,
    ProbeBw { phase: usize, phase_start_ms: f64 },
}

const BBR_HIGH_GAIN: f64 = 2.885;
const BBR_CYCLE: [f64; 8] = [1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
const BBR_BW_WINDOW_ROUNDS: u64 = 10;
const BBR_MIN_RTT_WINDOW_MS: f64 = 10_000.0;

#[derive(Debug, Clone)]
pub struct Bbr {
    mode: BbrMode,
    bw_samples: VecDeque<(u64, f64)>,
    initial_bw: f64,
    min_rtt_ms: f64,
    min_rtt_stamp_ms: f64,
    round: u64,
    round_end_seq: u64,
    full_bw: f64,
    full_bw_rounds: u32,
    pub cwnd: f64,
    pub pacing_gain: f64,
}

impl Bbr {
    pub fn new(initial_cwnd: f64, base_rtt_ms: f64) -> Self {
        Bbr {
            mode: BbrMode::Startup,
            bw_samples: VecDeque::new(),
            initial_bw: initial_cwnd * MSS_BYTES as f64 / base_rtt_ms,
            min_rtt_ms: base_rtt_ms,
            min_rtt_stamp_ms: 0.0,
            round: 0,
            round_end_seq: 0,
            full_bw: 0.0,
            full_bw_rounds: 0,
            cwnd: initial_cwnd,
            pacing_gain: BBR_HIGH_GAIN,
        }
    }

    /// Windowed maximum of recent delivery-rate samples, bytes/ms.
    pub fn btl_bw(&self) -> f64 {
        self.bw_samples
            .iter()
            .map(|&(_, bw)| bw)
            .fold(self.initial_bw * (self.bw_samples.is_empty() as u8 as f64), f64::max)
    }

    fn bdp_pkts(&self, gain: f64) -> f64 {
        gain * self.btl_bw() * self.min_rtt_ms / MSS_BYTES as f64
    }

    fn on_ack(&mut self, ack: &AckInfo) {
        let mut round_start = false;
        if ack.seq >= self.round_end_seq {
            self.round += 1;
            self.round_end_seq = ack.next_seq;
            round_start = true;
        }
        if let Some(rate) = ack.delivery_rate {
            if rate.is_finite() && rate > 0.0 {
                self.bw_samples.push_back((self.round, rate));
            }
        }
        while let Some(&(r, _)) = self.bw_samples.front() {
            if self.round - r > BBR_BW_WINDOW_ROUNDS {
                self.bw_samples.pop_front();
            } else {
                break;
            }
        }
        if ack.rtt_ms < self.min_rtt_ms || ack.now_ms - self.min_rtt_stamp_ms > BBR_MIN_RTT_WINDOW_MS {
            self.min_rtt_ms = ack.rtt_ms;
            self.min_rtt_stamp_ms = ack.now_ms;
        }
        let bw = self.btl_bw();
        match self.mode {
            BbrMode::Startup => {
                if round_start {
                    if bw >= self.full_bw * 1.25 {
                        self.full_bw = bw;
                        self.full_bw_rounds = 0;
                    } else {
                        self.full_bw_rounds += 1;
                    }
                    if self.full_bw_rounds >= 3 {
                        self.mode = BbrMode::Drain;
                    }
                }
            }
            BbrMode::Drain => {
                if (ack.inflight_pkts as f64) <= self.bdp_pkts(1.0) {
                    self.mode = BbrMode::ProbeBw {
                        phase: 0,
                        phase_start_ms: ack.now_ms,
                    };
                }
            }
            BbrMode::ProbeBw {
                phase,
                phase_start_ms,
            } => {
                if ack.now_ms - phase_start_ms >= self.min_rtt_ms {
                    self.mode = BbrMode::ProbeBw {
                        phase: (phase + 1) % BBR_CYCLE.len(),
                        phase_start_ms: ack.now_ms,
                    };
                }
            }
        }
        self.pacing_gain = match self.mode {
            BbrMode::Startup => BBR_HIGH_GAIN,
            BbrMode::Drain => 1.0 / BBR_HIGH_GAIN,
            BbrMode::ProbeBw { phase, .. } => BBR_CYCLE[phase],
        };
        let cwnd_gain = if self.mode == BbrMode::Startup { BBR_HIGH_GAIN } else { 2.0 };
        self.cwnd = self.bdp_pkts(cwnd_gain).clamp(4.0, MAX_CWND_PKTS);
    }

    fn pacing_rate(&self) -> f64 {
        self.pacing_gain * self.btl_bw()
    }
}

#[derive(Debug, Clone)]
pub enum CongestionControl {
    Dctcp(Dctcp),
    Cubic(Cubic),
    Bbr(Bbr),
}

impl CongestionControl {
    pub fn new(alg: CcAlgorithm, initial_cwnd: f64, base_rtt_ms: f64) -> Self {
        match alg {
            CcAlgorithm::DctcpL4S => CongestionControl::Dctcp(Dctcp::new(initial_cwnd)),
            CcAlgorithm::CubicLike => CongestionControl::Cubic(Cubic::new(initial_cwnd)),
            CcAlgorithm::BbrLike => CongestionControl::Bbr(Bbr::new(initial_cwnd, base_rtt_ms)),
        }
    }

    pub fn output(&self) -> CcOutput {
        match self {
            CongestionControl::Dctcp(d) => CcOutput {
                cwnd_pkts: d.cwnd,
                pacing_rate: None,
            },
            CongestionControl::Cubic(c) => CcOutput {
                cwnd_pkts: c.cwnd,
                pacing_rate: None,
            },
            CongestionControl::Bbr(b) => CcOutput {
                cwnd_pkts: b.cwnd,
                pacing_rate: Some(b.pacing_rate()),
            },
        }
    }

    pub fn on_loss(&mut self, now_ms: f64, seq: u64, next_seq: u64) -> CcOutput {
        match self {
            CongestionControl::Dctcp(d) => d.on_loss(seq, next_seq),
            CongestionControl::Cubic(c) => c.on_loss(now_ms, seq, next_seq),
            // Loss is not a primary signal for the rate prober.
            CongestionControl::Bbr(_) => {}
        }
        self.output()
    }
}

/// Apply one ACK to a flow's congestion controller.
pub fn cc_on_ack(cc: &mut CongestionControl, ack: &AckInfo) -> CcOutput {
    match cc {
        CongestionControl::Dctcp(d) => d.on_ack(ack),
        CongestionControl::Cubic(c) => c.on_ack(ack),
        CongestionControl::Bbr(b) => b.on_ack(ack),
    }
    cc.output()
}
