//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; each op
//! validates shapes, rejects non-finite results and keeps whatever it needs
//! for its backward rule. [`Tape::backward`] walks the list once in reverse and
//! accumulates gradients additively across fan-out. Parameters live in a
//! [`ParamStore`] and are copied onto the tape on first use.
//!
//! All reductions run in a fixed sequential order, so identical inputs give
//! bitwise-identical values.

mod adam;
mod conv;
mod gradcheck;
mod mha;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use mha::{mha, MhaOutput, MhaWeights};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{BnMode, BnStats, CustomOp, Gradients, Tape, Var, BCE_CLAMP, BN_EPS, LN_EPS};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid input to {op}: {detail}")]
    Input { op: &'static str, detail: String },
}
