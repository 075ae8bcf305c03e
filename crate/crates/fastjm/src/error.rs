//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {actual}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered: {context}")]
    NonFinite { context: String },

    #[error("event time {time} missing from baseline support for cause {cause}")]
    EventTimeMissing { cause: usize, time: f64 },

    #[error("matrix factorization failed: {context}")]
    Factorization { context: String },

    #[error("singular system: {context}")]
    Singular { context: String },

    #[error("input not sorted at index {index}: {context}")]
    Unsorted { index: usize, context: String },

    #[error("invalid argument: {context}")]
    InvalidArgument { context: String },

    #[error("empty weighted risk set at knot {knot} (cause {cause})")]
    EmptyRiskSet { cause: usize, knot: f64 },

    #[error("posterior mass lost for subject `{subject}`; widen quadrature")]
    PosteriorMassLost { subject: String },

    #[error("fit has not converged; refusing to compute standard errors")]
    NotConverged,

    #[error("data validation failed: {context}")]
    Validation { context: String },

    #[error("{context}")]
    Io { context: String },
}

impl Error {
    pub fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context: context.into(),
        }
    }

    pub fn validation(context: impl Into<String>) -> Self {
        Error::Validation {
            context: context.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            context: e.to_string(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io {
            context: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io {
            context: e.to_string(),
        }
    }
}
