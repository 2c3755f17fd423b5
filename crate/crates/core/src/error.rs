use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dataset error in {file}: {msg}")]
    Dataset { file: PathBuf, msg: String },

    #[error("mask provider failed on image {image_id}: {msg}")]
    Provider { image_id: String, msg: String },

    #[error("checksum mismatch for cache entry {0}")]
    Checksum(PathBuf),

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("non-finite loss at step {step} (batch {batch_id})")]
    NonFiniteLoss { step: usize, batch_id: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("safetensors: {0}")]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn dataset(file: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Dataset {
            file: file.into(),
            msg: msg.into(),
        }
    }
}
