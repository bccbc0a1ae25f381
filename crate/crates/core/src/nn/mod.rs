//! Dense-array neural-network substrate: tensors, a reverse-mode tape over a
//! fixed op set, parameter initialization, Adam, and checkpoint I/O.
//!
//! Everything is generic over the element type so training runs at f32 while
//! gradient checks run end-to-end at f64. Reductions (means, norms, batch
//! statistics, dot products) accumulate in f64 regardless of the element
//! type.

mod checkpoint;
pub mod gradcheck;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointRecord};
pub use layers::{BatchNorm, Conv2d, Linear};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use tape::{BnStats, Gradients, Mode, Tape, Var};
pub use tensor::{Element, Tensor};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("checkpoint format error ({path}): {message}")]
    Checkpoint { path: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
