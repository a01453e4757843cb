//! The classifier: backbone plus the two-unit head, its training loop,
//! checkpoint format and prediction.

mod checkpoint;
mod config;
mod network;
mod train;

pub use checkpoint::{
    decode_model, default_design_notes, encode_model, hex, load_checkpoint, load_checkpoint_for, parse_checkpoint,
    read_meta, save_checkpoint, sidecar_path, write_atomic, CheckpointError, CheckpointMeta, RawCheckpoint,
    StoredTensor, FORMAT_VERSION, MAGIC,
};
pub use config::{Backbone, HeadConfig, ModelConfig, SmallConvConfig, TrainingConfig, OUTPUT_UNITS};
pub use network::{build_model, Model, Prediction};
pub use train::{evaluate, train, train_with_progress, EpochRecord, Evaluation, TrainError, TrainOutcome, TrainingHistory};

use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input sample shape {found:?} does not match the model's {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Nn(#[from] NnError),
}
