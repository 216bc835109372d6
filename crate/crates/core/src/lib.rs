//! Mixed-precision iterative refinement for low-rank Lyapunov equations
//! `A X + X A^T + W = 0` with `W = L L^T` or `W = L S L^T`.
//!
//! The solver is the matrix sign function Newton iteration run in a reduced
//! precision; residual factorization and solution updates run in higher
//! precisions. Reduced formats (bf16, fp16, fp32) are emulated by rounding
//! every elementary operation, see [`precision`].

pub mod cli;
pub mod error;
pub mod kernels;
pub mod matrix;
pub mod newton;
pub mod problems;
pub mod refine;
pub mod precision;
pub mod scalar;

pub use error::{Error, Result};
pub use kernels::PrecisionContext;
pub use matrix::DenseMatrix;
pub use precision::{Format, PrecisionFormat};
pub use scalar::Real;

/// Double-precision storage, the default for every driver.
pub type Matrix = DenseMatrix<f64>;
/// Single-precision storage.
pub type Matrix32 = DenseMatrix<f32>;
