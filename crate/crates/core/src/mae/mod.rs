//! Vision-transformer masked autoencoder.
//!
//! Images are cut into patches, a random subset is hidden, the encoder sees
//! only the visible patches and a lighter decoder reconstructs pixels for
//! every position. The per-sample loss is the mean over evaluated patches of
//! the per-patch mean squared pixel error, so it is a fixed positive
//! rescaling of the squared Frobenius reconstruction error.

mod config;
mod model;
mod patch;

pub use config::{masked_count, MaeConfig, MLP_RATIO};
pub use model::{
    build_encoder, build_mae, encode_features, encode_features_batch, init_params, mae_forward, patchify_batch,
    per_sample_mae_grads, sincos_position_embedding, EncoderGraph, MaeGraph, MaeParams,
};
pub use patch::{patchify, random_mask, unpatchify, MaskSpec};

use thiserror::Error;

use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum MaeError {
    #[error("model config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
