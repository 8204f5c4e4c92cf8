//! Adam optimizer, training loop and checkpoint persistence.

mod adam;
mod checkpoint;
mod fit;

use thiserror::Error;

use crate::data::DataError;
use crate::model::{Model, ModelError};
use crate::tensor::TensorError;

pub use adam::{adam_step, AdamState, BETA1, BETA2, DEFAULT_LR, EPS};
pub use checkpoint::{
    decode_checkpoint, decode_raw, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, NamedTensor,
    RawCheckpoint, MAGIC, VERSION,
};
pub use fit::{batch_tensors, fit, fit_with, EpochStats, StepLog, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training records")]
    EmptyDataset,
    #[error("image {id} is {got_w}x{got_h}, expected {want_w}x{want_h} like the rest of the batch")]
    NonUniformSizes {
        id: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("optimizer shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Fresh optimizer state covering the model's trainable parameters.
pub fn optimizer_for(model: &Model, lr: f64) -> Result<AdamState<f32>, TrainError> {
    AdamState::new(
        model.params().iter().filter(|p| p.trainable).map(|p| p.tensor.shape()),
        lr,
    )
}
