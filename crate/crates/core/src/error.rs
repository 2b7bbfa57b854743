use std::path::PathBuf;

/// Errors produced by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input to an operation (bad token id, length mismatch, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A configuration value violates its invariant.
    #[error("configuration error: {0}")]
    Config(String),
    /// Exact enumeration was requested beyond the enumerability cap.
    #[error("refusing to enumerate {requested} sequences (cap {cap})")]
    NotEnumerable { requested: u128, cap: u128 },
    /// The ground truth needed by an operation does not exist for this task.
    #[error("unavailable: {0}")]
    Unavailable(String),
    /// A loss or gradient became non-finite during training.
    #[error("numeric abort at step {step}: {reason}")]
    NumericAbort {
        step: usize,
        reason: String,
        dump: String,
    },
    /// Checkpoint checksum did not match its content.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    /// Checkpoint or parameter file describes a different parameterization.
    #[error("parameterization mismatch: {0}")]
    Descriptor(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
