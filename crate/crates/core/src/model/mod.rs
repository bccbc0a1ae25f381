//! The pose network: a shared convolutional backbone with three heads
//! (viewpoint embedding, in-plane regression, orientation verification),
//! their losses, and the training loop.

mod eval;
mod losses;
mod network;
mod train;

pub use eval::{inplane_prediction_error_deg, predicted_angle_deg, triplet_ranking_accuracy};
pub use losses::{combined_loss_value, inplane_image_loss, ranking_loss};
pub use network::{crop_to_tensor, Encoded, Network, NetworkConfig};
pub use train::{train, TrainConfig, TrainReport};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("network error: {0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Diverged {
        epoch: usize,
        step: usize,
        message: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}
