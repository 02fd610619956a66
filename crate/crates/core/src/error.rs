use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("patient {patient_id}: {message}")]
    InvalidRecord { patient_id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not enough records: need at least {needed}, got {got}")]
    TooFewRecords { needed: usize, got: usize },

    #[error("operation requires {required}, model uses {actual}")]
    WrongMode { required: &'static str, actual: String },

    #[error("non-finite training loss at epoch {epoch}, batch {batch} (lr {lr:e}); patients: {patients:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64, patients: Vec<String> },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn record(patient_id: &str, message: impl Into<String>) -> Self {
        Error::InvalidRecord { patient_id: patient_id.to_owned(), message: message.into() }
    }
}
