//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operation set is exactly what the transformer, the LoRA adapters and
//! the prefix-generator supernet need. Each forward op checks its output for
//! non-finite values and fails with the op's name rather than propagating
//! NaN/Inf. [`finite_diff_check`] is the independent oracle for every
//! backward rule.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, primitive_gradient_errors};
pub use graph::{argmax, Activation, Graph, Mode, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;
