use thiserror::Error;

use crate::tensor::serialize::SerializeError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint incompatible with model: {field}: {detail}")]
    Incompatible { field: String, detail: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:.4e})")]
    NonFiniteLoss { epoch: usize, batch: usize, param_norm: f64 },
    #[error(transparent)]
    Serialize(#[from] SerializeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
