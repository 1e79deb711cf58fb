//! Scoring, percentiles and the experiment runners.

pub mod experiments;
pub mod metrics;
pub mod protocol;


pub use metrics::{
    delivered_latencies, match_events, mse_on_sharp_changes, p99_reduction, percentile, reduction_pct, score_changes,
    score_changes_with_slack, sse_on_sharp_changes, ChangeScore, TailStats,
};
pub use protocol::{evaluate_predictor, segment_bases, PredictorEval};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} true values vs {1} predictions")]
    Length(usize, usize),
    #[error("no values")]
    Empty,
    #[error("no true sharp changes; metric undefined")]
    NoEvents,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("predictor failed: {0}")]
    Predictor(String),
}
