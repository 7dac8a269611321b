//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what} {got} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("sequence length {got} exceeds maximum {limit}")]
    SequenceTooLong { got: usize, limit: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown graph node or slot: {0}")]
    Graph(String),

    #[error("clean/corrupt pairing mismatch: {0}")]
    Pairing(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("all {0} prompt pairs degenerate (|clean - corrupt| metric gap below 1e-8)")]
    Degenerate(usize),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("generator capacity exceeded: requested {requested}, capacity {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
