//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The [`Graph`] records a fixed set of primitives (dense products, sequence
//! windows, attention building blocks, layer and batch normalization,
//! embedding lookup, segment max-pooling, dropout and softmax cross-entropy).
//! [`Adam`] updates parameters from the resulting gradients and
//! [`grad_check`] compares them against central finite differences.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod optim;
mod tensor;

use thiserror::Error;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{dropout, dropout_mask, softmax, BatchStats, ForwardMode, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, ParamSlot};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("{op}: a random stream is required in this forward mode")]
    MissingRng { op: &'static str },
    #[error("backward called on a node that was never recorded")]
    BackwardBeforeForward,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{param}` in layer {layer}")]
    NonFiniteGradient { layer: i32, param: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
