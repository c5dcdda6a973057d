use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CapcError>;

#[derive(Debug, Error)]
pub enum CapcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("class {class} has {available} labelled samples, {required} required")]
    InsufficientData {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// Unknown or malformed key in a run configuration file. `key` is the
    /// dotted `section.key` path.
    #[error("invalid config key `{key}`: {reason}")]
    ConfigKey { key: String, reason: String },

    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFinite { param: String, step: usize },

    #[error("dataset is empty")]
    EmptyDataset,
}

impl CapcError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CapcError::InvalidArgument(msg.into())
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CapcError::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CapcError::Io {
            path: path.into(),
            source,
        }
    }
}
