//! Dense tensor arithmetic with reverse-mode differentiation, plus a
//! central-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use tape::{Grads, Tape, Var};
pub use tensor::{DType, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} at position {position} is out of range (< {bound})")]
    IndexOutOfRange {
        op: &'static str,
        position: usize,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
