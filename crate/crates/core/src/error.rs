use std::path::PathBuf;

/// Errors produced by the reduced order modelling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
    #[error("non-finite fitness {value} at {point:?}")]
    NonFiniteFitness { value: f64, point: Vec<f64> },
    #[error("snapshot {index}: {source}")]
    Snapshot {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{variant}: {source}")]
    Variant {
        variant: String,
        #[source]
        source: Box<Error>,
    },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by user input (configuration, files) rather than by a computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Malformed { .. } | Error::Io { .. } | Error::CountMismatch(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
