//! Fundamental solutions of degenerate Kolmogorov operators `𝒜 + Y` with
//! coefficients that are measurable in time and Hölder continuous in space.

// `!(a > b)` is used on purpose so that NaN fails every range check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Dense small-matrix kernels read more clearly with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod cauchy;
pub mod coeffs;
pub mod config;
pub mod density;
pub mod error;
pub mod expr;
pub mod kernel;
pub mod levi;
pub mod linalg;
pub mod parametrix;
pub mod quadrature;
pub mod sampling;
pub mod structure;
pub mod verify;

pub use error::{KolmoError, Result};
