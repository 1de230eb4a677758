//! Minimal dense-tensor reverse-mode differentiation.
//!
//! A [`Tape`] records a closed set of primitives (matrix multiply, elementwise
//! activations, segment softmax/sum, layer/batch normalization, log-softmax,
//! NLL loss, gather/scatter) as they execute; [`Tape::backward`] then walks
//! the recording once in reverse to produce gradients for every tracked leaf.
//! Everything is 64-bit so finite-difference checks can be tight.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{GradMap, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tape primitives and the backward pass.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {shapes}")]
    ShapeMismatch { op: &'static str, shapes: String },
    #[error("segment {0} is empty in segment_softmax")]
    InvalidSegment(usize),
    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalarLoss(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
