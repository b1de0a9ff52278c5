//! Tensors, reverse-mode differentiation, Adam, and layer helpers.

mod adam;
mod checkpoint;
mod graph;
mod kernels;
mod layers;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use checkpoint::{load_params, save_params, Checkpoint};
pub use graph::{Graph, NodeId, PixelShift};
pub use layers::{BoundParams, LayerSpec, ParamSet};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensor of shape {0:?} is not a scalar")]
    NotScalar(Vec<usize>),
    #[error("shape mismatch at {node}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        node: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("kernel {kernel:?} larger than padded input {input:?} at {node}")]
    KernelTooLarge {
        node: String,
        kernel: [usize; 2],
        input: [usize; 2],
    },
    #[error("non-finite value at {node}")]
    NonFinite { node: String },
    #[error("{0} does not depend on any differentiable input")]
    NotDifferentiable(String),
    #[error("no input named `{0}`")]
    UnknownInput(String),
    #[error("input `{0}` bound twice")]
    DuplicateInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
