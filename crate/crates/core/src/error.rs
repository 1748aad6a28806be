use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Out-of-range or inconsistent construction parameter.
    #[error("parameter error: {0}")]
    Param(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error for task {id}: {message}")]
    Validation { id: String, message: String },

    /// A caller broke an API contract (wrong mode, mismatched lengths, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 I/O and input data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Contract(_) | Error::Config(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::Validation { .. } | Error::Serde(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
