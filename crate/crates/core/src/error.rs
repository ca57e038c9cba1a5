use thiserror::Error;

use crate::expr::{EvalError, ParseError};

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum KolmoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("drift matrix is not in canonical block form: {0}")]
    NotCanonical(String),

    #[error("covariance not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("time increment {dt:e} is below the minimum {min:e} (near-delta regime)")]
    TooShort { dt: f64, min: f64 },

    #[error("matrix exponential overflowed for |tB| = {norm:e}")]
    Overflow { norm: f64 },

    #[error("dimension budget exceeded: {0}")]
    DimensionBudget(String),

    #[error("derivative order {0} exceeds the supported maximum of 4")]
    DerivativeOrder(usize),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("series did not reach tolerance {tol:e} within {max_terms} terms (partial sum {partial:e}, tail {tail:e})")]
    SeriesNotConverged {
        tol: f64,
        max_terms: usize,
        partial: f64,
        tail: f64,
    },

    #[error("horizon too long for declared growth: 2*C*lambda_max = {value:.4} >= 1")]
    GrowthHorizon { value: f64 },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KolmoError {
    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            KolmoError::InvalidInput(_)
                | KolmoError::NotCanonical(_)
                | KolmoError::Parse(_)
                | KolmoError::Config(_)
                | KolmoError::Json(_)
                | KolmoError::DimensionBudget(_)
                | KolmoError::DerivativeOrder(_)
                | KolmoError::Io(_)
        )
    }
}

pub type Result<T, E = KolmoError> = std::result::Result<T, E>;
