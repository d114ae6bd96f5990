use std::path::PathBuf;

use cmunet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("checkpoint format error at {entry}: {msg}")]
    Format { entry: String, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn format(entry: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format { entry: entry.into(), msg: msg.into() }
    }
}
