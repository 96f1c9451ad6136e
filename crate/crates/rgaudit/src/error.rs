use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, AuditError>;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} has {nodes} nodes; exact enumeration is capped at {limit} nodes")]
    EnumerationLimit {
        what: String,
        nodes: usize,
        limit: usize,
    },

    #[error(
        "stability system is numerically singular (smallest singular value below \
         {threshold:e} of the largest); rerun with a nonzero ridge regularization"
    )]
    SingularSystem { threshold: f64 },

    #[error("ensembles are not paired: {reason}")]
    UnpairedEnsembles { reason: String },

    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },

    #[error("invalid distribution: {reason}")]
    InvalidDistribution { reason: String },

    #[error("invalid {what}: {reason}")]
    InvalidArgument { what: &'static str, reason: String },

    #[error("operator basis is truncated: {reason}")]
    TruncatedBasis { reason: String },

    #[error("eigenvalue iteration failed to converge (size {size})")]
    EigenFailure { size: usize },

    #[error("dataset line {line}: {reason}")]
    DatasetSchema { line: usize, reason: String },

    #[error("config: {reason}")]
    Config { reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl AuditError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        AuditError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn config(reason: impl Into<String>) -> Self {
        AuditError::Config {
            reason: reason.into(),
        }
    }
}
