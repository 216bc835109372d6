use std::path::PathBuf;

use thiserror::Error;

use crate::precision::Format;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch ({}x{} vs {}x{})", .left.0, .left.1, .right.0, .right.1)]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("matrix is singular (zero pivot in column {column})")]
    Singular { column: usize },

    #[error("non-finite value produced in {format} arithmetic")]
    Overflow { format: Format },

    #[error("Newton iteration diverged in {format} arithmetic at step {step}")]
    Diverged { step: usize, format: Format },

    #[error("Kronecker oracle limited to n <= {max}, got n = {n}")]
    OracleTooLarge { n: usize, max: usize },

    #[error("unknown precision format `{0}` (expected bf16, fp16, fp32 or fp64)")]
    UnknownFormat(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}:{line}: {msg}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
