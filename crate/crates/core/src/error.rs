use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stale or incompatible forward state: {0}")]
    State(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("out of range: {0}")]
    Range(String),
    #[error("step {0} is already recorded")]
    DuplicateStep(u64),
    #[error("no snapshot recorded at step {0}")]
    MissingSnapshot(u64),
    #[error("curve fit failed: {0}")]
    Fit(String),
    #[error("non-finite value at flat index {index}: {msg}")]
    Numeric { index: usize, msg: String },
    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: u64, loss: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config { .. } | Error::Spec(_) => 2,
            Error::Divergence { .. } | Error::Numeric { .. } => 3,
            Error::Io { .. } | Error::Format(_) => 4,
            _ => 1,
        }
    }
}
