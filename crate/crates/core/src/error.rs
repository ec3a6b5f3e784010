use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("grid incompatibility: {0}")]
    GridIncompatible(String),

    #[error("non-finite state at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("integrator defect {defect:.3e} above tolerance {tolerance:.3e}; refine the grid")]
    RefineStep { defect: f64, tolerance: f64 },

    #[error("optimizer budget exhausted: {0}")]
    BudgetExhausted(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
