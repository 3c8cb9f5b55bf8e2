//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! Every operation executes eagerly and records a backward rule on a
//! [`Tape`]. Calling [`Tape::backward`] on a scalar node sweeps the tape in
//! reverse creation order and accumulates adjoints additively, so shared
//! subexpressions are handled without special casing.
//!
//! ```
//! use geossl_core::diffcore::{DenseArray, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(DenseArray::scalar(3.0));
//! let y = x.square().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! Operations whose derivative is not a composition of primitives (the
//! soft-rank projection, for one) register their own vector-Jacobian product
//! through [`Tape::custom`].

mod array;
mod gradcheck;
mod ops;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{grad_check, relative_error};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a {expected}-D array, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis}")]
    Axis { op: &'static str, axis: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("cannot normalize row {row}: zero norm")]
    ZeroNorm { row: usize },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("function value is not finite")]
    NonFiniteObjective,
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
}
