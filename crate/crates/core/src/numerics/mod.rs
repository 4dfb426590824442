//! Dense tensor algebra with reverse-mode automatic differentiation.
//!
//! Everything the toolkit trains or evaluates runs through this module: a
//! flat row-major [`Tensor`], a recording [`Graph`] (the computation tape),
//! and a finite-difference oracle in [`gradcheck`] that every adjoint rule
//! is checked against. Storage is f32 by default; the same code instantiates
//! at f64 for gradient checking, where central differences need the headroom.

mod graph;
pub mod gradcheck;
mod scalar;
mod tensor;

pub use graph::{AdjointFault, FaultOp, Graph, Var};
pub use scalar::{gemm, Precision, Scalar};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range ({bound}) in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
