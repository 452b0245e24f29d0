//! A small hierarchical vision transformer for heatmap regression, with a
//! hand-written reverse-mode differentiator.

pub mod checkpoint;
pub mod fgsa;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod tensor;

use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{gradcheck, GradCheckEntry};
pub use graph::{Graph, ParamId, Var};
pub use layers::{Mode, ParamStore};
pub use model::{output_to_stacks, stacks_to_tensor, InjectPoint, NetConfig, Network};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
