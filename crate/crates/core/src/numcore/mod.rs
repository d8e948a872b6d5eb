//! Differentiable arrays, optimizer, RNG streams and gradient checking.

mod adam;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

use std::collections::BTreeMap;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_named};
pub use rng::{derive_seed, normal, rng_stream, standard_normals, Rng};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Named parameter arrays, iterated in name order.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("gradient for {name} has shape {got:?}, parameter has {want:?}")]
    GradShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("no parameter named {name}")]
    UnknownParam { name: String },
}
