//! A small reverse-mode autodiff engine with exactly the layers the decoders
//! need (dense, 1-D convolution, max pooling, batch norm, dropout, LSTM),
//! Adam, and a finite-difference gradient checker.
//!
//! All arithmetic is `f64`.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT,
};
pub use gradcheck::{
    grad_check, grad_check_against, relative_error, GradCheckConfig, GradCheckReport, ParamCheck,
};
pub(crate) use graph::gemm;
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use layers::{Activation, Forward, InputShape, LayerSpec, Mode, Network, Padding};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("backward called without a recorded forward graph")]
    NoGraph,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("checkpoint I/O: {0}")]
    Io(String),
}
