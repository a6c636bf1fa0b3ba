use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sample {sample} already updated in epoch {epoch}")]
    DoubleUpdate { sample: usize, epoch: u32 },

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFinite { epoch: u32, sample: usize },

    #[error("{0}")]
    State(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user input (bad files, flags or configs)
    /// rather than by a fault in the engine.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::State(_) | Error::DoubleUpdate { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
