//! Deterministic discrete-event simulation of a dual-queue bottleneck.

pub mod cc;
pub mod config;
pub mod engine;
pub mod queue;
pub mod workload;

pub use cc::{cc_on_ack, AckInfo, CcAlgorithm, CcOutput, CongestionControl, MSS_BYTES};
pub use config::{bdp_packets, DelayStep, SimConfig, Topology};
pub use engine::{run_simulation, run_simulation_with_report, EventKind, QueueSelector, SimEvent, SimReport};
pub use queue::{dual_queue_enqueue, DualQueue, EnqueueOutcome, QueueState};
pub use workload::{Dist, WorkloadSpec};

use crate::trace_model::{PacketRecord, Trace};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("simulation invariant violated: {0}")]
    Invariant(String),
}

/// Flow ids listed under the trace's `monitored_flows` meta key.
pub fn monitored_flows(trace: &Trace) -> Option<Vec<u32>> {
    let list = trace.meta.get("monitored_flows")?;
    list.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse().ok())
        .collect()
}

/// The monitored packet stream: every record of a monitored flow, in trace
/// order. Traces without the meta key are taken whole.
pub fn monitored_stream(trace: &Trace) -> Vec<PacketRecord> {
    match monitored_flows(trace) {
        Some(ids) => trace.stream(|r| ids.contains(&r.flow_id)),
        None => trace.records.clone(),
    }
}
