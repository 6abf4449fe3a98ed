use std::io;

use thiserror::Error;

/// Errors produced by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{what} ({value}) is not divisible by {by}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        by: usize,
    },

    #[error("zero dimension: {rows}x{cols}")]
    ZeroDimension { rows: usize, cols: usize },

    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("input rows are not permuted according to the routing plan")]
    Unpermuted,

    #[error(
        "block ({block_row}, {block_col}) has only {allowed} routed columns in its window; at least 4 are required"
    )]
    InfeasibleWindow {
        block_row: usize,
        block_col: usize,
        allowed: usize,
    },

    #[error("policy mismatch: {0}")]
    PolicyMismatch(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
