//! Minimal differentiable-computation substrate: 2D tensors, a reverse-mode
//! tape, standard layers, AdamW and a checkpoint format.

use std::path::PathBuf;

use thiserror::Error;

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointManifest};
pub use graph::{forward_backward, softmax, Graph, Var};
pub use optim::{adamw_step, adamw_step_grouped, AdamWConfig, OptimState};
pub use params::{Gradients, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("parameter key mismatch: {0}")]
    KeyMismatch(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{}: malformed checkpoint: {message}", path.display())]
    Format { path: PathBuf, message: String },
}
