//! Dense-tensor numerical core: plain tensors, a reverse-mode tape,
//! batch normalization with running statistics, Adam, and a finite-difference
//! gradient checker.
//!
//! Everything is 64-bit and deterministic: repeated invocation on identical
//! inputs yields bitwise-identical outputs. Operations are pure given their
//! explicit inputs; the only mutable state is owned by the caller
//! ([`BatchNormState`] running statistics, [`Adam`] moments).

mod adam;
mod batchnorm;
mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use adam::Adam;
pub use batchnorm::{batch_norm, BatchNormState, BnMode};
pub use gradcheck::{finite_diff_check, BlockCheck, GradCheckReport};
pub use linalg::{matmul, matmul_nt, matmul_tn};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by the numerical core.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite value at index {index} ({value}) in {context}")]
    NonFinite { context: String, index: usize, value: f64 },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("batch normalization in train mode requires a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NumError>;
