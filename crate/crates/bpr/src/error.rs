use thiserror::Error;

/// Errors surfaced by the modelling and inference layers.
#[derive(Debug, Error)]
pub enum BprError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, BprError>;
