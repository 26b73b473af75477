//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Only the primitives needed by the contrastive losses and the CTR model are
//! provided; every one has an analytic backward rule. [`finite_diff`] is an
//! independent central-difference oracle used to check those rules.

mod gradcheck;
mod nn;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{backward, finite_diff, forward, max_relative_error, relative_error, Recorded};
pub use nn::{Linear, Mlp, MlpVars};
pub use optim::{Optimizer, ParamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{outer_aug_values, stable_sigmoid};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({shapes})")]
    ShapeMismatch { op: &'static str, shapes: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: zero-norm {which} argument")]
    ZeroNorm { op: &'static str, which: String },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("seed shape {got:?} does not match output shape {expected:?}")]
    SeedShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("finite differences need a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, shapes: String) -> Self {
        Self::ShapeMismatch { op, shapes }
    }
}
