use std::time::Duration;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing model `{0}`")]
    MissingModel(String),
    #[error("arithmetic overflow: {0}")]
    Overflow(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("evaluator failed: {0}")]
    Evaluator(String),
    #[error("evaluator protocol violation: {0}")]
    Protocol(String),
    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
