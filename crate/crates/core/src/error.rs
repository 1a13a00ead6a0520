use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] protocad_tensor::TensorError),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("config: {0}")]
    Config(String),
    #[error("episode file: {0}")]
    Episode(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
