//! Dense `f64` tensors and a minimal reverse-mode autodiff tape.
//!
//! The op set covers what the stochastic MLP, the bounded cross-entropy and
//! the KL formulas need. There is no general broadcasting: elementwise ops
//! require identical shapes, and scalars combine with tensors only through
//! [`Var::scale`] and [`Var::add_scalar`].

mod tape;
mod tensor;

pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
