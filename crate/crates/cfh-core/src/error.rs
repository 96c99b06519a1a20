//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CfhError>;

#[derive(Debug, Error)]
pub enum CfhError {
    /// Bad grid shape, mismatched fields, out-of-range indices.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// The numerics left their domain of validity: NaN, angle degeneracy,
    /// sign loss of a quantity required positive.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Step-size underflow or iteration budget exhausted in an integrator.
    #[error("integrator failure: {0}")]
    Integrator(String),

    /// A verification suite rejected the data.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CfhError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CfhError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CfhError::Config(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        CfhError::Numerical(msg.into())
    }
    pub fn check_failed(msg: impl Into<String>) -> Self {
        CfhError::CheckFailed(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        CfhError::Parse(msg.into())
    }
}
