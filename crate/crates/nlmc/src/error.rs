//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NlmcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("parse error in {source_name} at line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("numerical failure in {context}")]
    Numerical { context: String },

    #[error("optimizer aborted: non-finite value in parameter block {block}")]
    OptimizerAbort { block: String },

    #[error("unsupported quadrature: family {family} with latent dim {latent_dim} at order {order} exceeds the node budget")]
    UnsupportedQuadrature {
        family: String,
        latent_dim: usize,
        order: usize,
    },

    #[error("snapshot version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch for array {array}")]
    ChecksumMismatch { array: String },

    #[error("inconsistent experts: {reason}")]
    InconsistentExperts { reason: String },

    #[error("empty input in {context}")]
    EmptyInput { context: String },

    #[error("job {job_id} failed: {message}")]
    JobFailure { job_id: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NlmcError>;

impl NlmcError {
    pub fn dim(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        NlmcError::DimensionMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        NlmcError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        NlmcError::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    pub fn numerical(context: impl Into<String>) -> Self {
        NlmcError::Numerical {
            context: context.into(),
        }
    }
}
