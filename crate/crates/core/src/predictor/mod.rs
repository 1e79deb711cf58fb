//! Per-packet latency predictor: featurization, the encoder model, the
//! change-point loss, training, head-only fine-tuning and checkpoints.

pub mod checkpoint;
pub mod features;
pub mod loss;
pub mod model;
pub mod train;

#[cfg(test)]
mod tests;

pub use checkpoint::{
    describe, export_embeddings, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ModelDescription,
    CHECKPOINT_MAGIC, SCHEMA_VERSION,
};
pub use features::{
    build_window, featurize, last_acked_at_or_before, targets_after, ContextWindow, FeatureRow, Featurizer, NormStats,
    Visibility, FEATURE_NAMES, N_FEATURES,
};
pub use loss::{change_point_loss, change_point_weights, LossConfig};
pub use model::{block_layout, predict, ModelConfig, ModelParams, PredictionBatch, HEAD_BLOCKS};
pub use train::{fine_tune, mean_loss, train, Dataset, FineTuneConfig, Sample, TrainConfig, TrainReport};

use crate::tensor_nn::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PredictorError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint schema version {0}")]
    UnsupportedVersion(u32),
}
