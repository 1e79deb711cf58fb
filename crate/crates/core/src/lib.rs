//! Packet-latency prediction and per-packet L4S queue selection: a
//! dual-queue network simulator, a small autograd library, a transformer
//! latency predictor with baselines, the closed-loop queue selector and the
//! evaluation harness.

pub mod baselines;
pub mod controller;
pub mod evalkit;
pub mod netsim;
pub mod predictor;
pub mod tensor_nn;
pub mod trace_model;

pub use baselines::{Ewma, LastValue, LatencyPredictor, LinRegWindowModel};
pub use controller::{PendingLedger, SelectorConfig};
pub use evalkit::experiments::{ExperimentConfig, ExperimentError};
pub use evalkit::{ChangeScore, TailStats};
pub use netsim::{SimConfig, Topology};
pub use predictor::{ContextWindow, ModelConfig, ModelParams, NormStats, PredictionBatch, PredictorError};
pub use trace_model::{
    Direction, PacketRecord, QueueMark, SharpChangeEvent, SharpChangeThresholds, Trace, TraceError,
};
