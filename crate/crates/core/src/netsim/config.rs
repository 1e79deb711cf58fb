use serde::{Deserialize, Serialize};

use super::cc::{CcAlgorithm, MSS_BYTES};
use super::workload::WorkloadSpec;
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// All flows share one bottleneck towards a single receiver.
    SingleBottleneck,
    /// Sender S1 (L4S + classic flows to R1) plus cross-traffic L4S flows
    /// from other senders to R2, all through one dual-queue router.
    L4SSelection,
}

/// Step change of the link propagation delay at a fixed simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayStep {
    pub at_s: f64,
    pub propagation_delay_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub bandwidth_mbps: f64,
    pub propagation_delay_ms: f64,
    pub queue_capacity_bdp_multiple: f64,
    pub n_l4s_flows: u32,
    pub n_classic_flows: u32,
    /// Cross-traffic L4S flows; `None` means 0 for SingleBottleneck and 10
    /// for L4SSelection.
    pub n_cross_flows: Option<u32>,
    pub l4s_cc: CcAlgorithm,
    pub classic_cc: CcAlgorithm,
    pub cross_cc: CcAlgorithm,
    pub flow_start_window_s: f64,
    pub duration_s: f64,
    pub base_rate_mbps: f64,
    /// Offered rate of the classic and cross classes; defaults to `base_rate_mbps`.
    pub classic_rate_mbps: Option<f64>,
    pub cross_rate_mbps: Option<f64>,
    pub workload: WorkloadSpec,
    pub seed: u64,
    pub topology: Topology,
    /// CE step-marking threshold; defaults to ceil(BDP / 4), capped at half
    /// the queue capacity.
    pub ecn_mark_threshold_pkts: Option<u32>,
    /// Scheduler share of the L4S queue when both queues are backlogged.
    pub l4s_weight: f64,
    pub initial_cwnd_pkts: f64,
    pub pacing: bool,
    /// Unresponsive constant-bit-rate source into the classic queue (0 = off).
    pub classic_cbr_mbps: f64,
    pub delay_step: Option<DelayStep>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            bandwidth_mbps: 100.0,
            propagation_delay_ms: 20.0,
            queue_capacity_bdp_multiple: 2.0,
            n_l4s_flows: 10,
            n_classic_flows: 4,
            n_cross_flows: None,
            l4s_cc: CcAlgorithm::DctcpL4S,
            classic_cc: CcAlgorithm::CubicLike,
            cross_cc: CcAlgorithm::DctcpL4S,
            flow_start_window_s: 10.0,
            duration_s: 300.0,
            base_rate_mbps: 5.0,
            classic_rate_mbps: None,
            cross_rate_mbps: None,
            workload: WorkloadSpec::default(),
            seed: 1,
            topology: Topology::SingleBottleneck,
            ecn_mark_threshold_pkts: None,
            l4s_weight: 0.5,
            initial_cwnd_pkts: 10.0,
            pacing: true,
            classic_cbr_mbps: 0.0,
            delay_step: None,
        }
    }
}

/// ceil(bandwidth × RTT / (8 × MSS)) with RTT = 2 × one-way propagation delay.
pub fn bdp_packets(config: &SimConfig) -> u64 {
    let bits = config.bandwidth_mbps * 1e6 * 2.0 * config.propagation_delay_ms / 1000.0;
    let pkts = bits / (8.0 * MSS_BYTES as f64);
    // Tolerate float noise so exact products are not bumped up by the ceil.
    ((pkts - 1e-9).ceil()).max(1.0) as u64
}

impl SimConfig {
    /// The six-L4S / four-classic sender with ten cross-traffic L4S flows.
    pub fn l4s_selection() -> Self {
        SimConfig {
            n_l4s_flows: 6,
            n_classic_flows: 4,
            n_cross_flows: Some(10),
            topology: Topology::L4SSelection,
            ..SimConfig::default()
        }
    }

    pub fn cross_flows(&self) -> u32 {
        self.n_cross_flows.unwrap_or(match self.topology {
            Topology::SingleBottleneck => 0,
            Topology::L4SSelection => 10,
        })
    }

    pub fn queue_capacity_pkts(&self) -> u32 {
        ((self.queue_capacity_bdp_multiple * bdp_packets(self) as f64).ceil() as u32).max(1)
    }

    pub fn mark_threshold_pkts(&self) -> u32 {
        self.ecn_mark_threshold_pkts.unwrap_or_else(|| {
            (bdp_packets(self).div_ceil(4) as u32).min((self.queue_capacity_pkts() / 2).max(1))
        })
    }

    pub fn duration_ms(&self) -> f64 {
        self.duration_s * 1000.0
    }

    /// One-way propagation delay in effect at `now_ms`.
    pub fn propagation_at(&self, now_ms: f64) -> f64 {
        match self.delay_step {
            Some(step) if now_ms >= step.at_s * 1000.0 => step.propagation_delay_ms,
            _ => self.propagation_delay_ms,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::Config(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        positive("bandwidth_mbps", self.bandwidth_mbps)?;
        positive("propagation_delay_ms", self.propagation_delay_ms)?;
        positive("duration_s", self.duration_s)?;
        positive("queue_capacity_bdp_multiple", self.queue_capacity_bdp_multiple)?;
        positive("base_rate_mbps", self.base_rate_mbps)?;
        positive("initial_cwnd_pkts", self.initial_cwnd_pkts)?;
        if let Some(r) = self.classic_rate_mbps {
            positive("classic_rate_mbps", r)?;
        }
        if let Some(r) = self.cross_rate_mbps {
            positive("cross_rate_mbps", r)?;
        }
        if !(self.flow_start_window_s.is_finite() && self.flow_start_window_s >= 0.0) {
            return Err(SimError::Config("flow_start_window_s must be >= 0".into()));
        }
        if !(self.l4s_weight > 0.0 && self.l4s_weight < 1.0) {
            return Err(SimError::Config(format!(
                "l4s_weight must be in (0, 1), got {}",
                self.l4s_weight
            )));
        }
        if !(self.classic_cbr_mbps.is_finite() && self.classic_cbr_mbps >= 0.0) {
            return Err(SimError::Config("classic_cbr_mbps must be >= 0".into()));
        }
        if let Some(step) = self.delay_step {
            positive("delay_step.propagation_delay_ms", step.propagation_delay_ms)?;
            if !(step.at_s.is_finite() && step.at_s >= 0.0) {
                return Err(SimError::Config("delay_step.at_s must be >= 0".into()));
            }
        }
        if self.ecn_mark_threshold_pkts == Some(0) {
            return Err(SimError::Config("ecn_mark_threshold_pkts must be >= 1".into()));
        }
        self.workload.check().map_err(SimError::Config)?;
        if self.n_l4s_flows + self.n_classic_flows + self.cross_flows() == 0
            && self.classic_cbr_mbps == 0.0
        {
            return Err(SimError::Config("configuration has no traffic sources".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig =
            serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
