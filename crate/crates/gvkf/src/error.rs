//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    #[error("invalid ray: {0}")]
    InvalidRay(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("camera required in neural mode")]
    MissingCamera,

    #[error("unknown voxel id: {0}")]
    InvalidId(String),

    #[error("solver failed: {0}")]
    SolverFailure(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("parse error in {field}: {message}")]
    Parse { field: String, message: String },

    #[error("NaN loss at iteration {0}")]
    NanLoss(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }
}
