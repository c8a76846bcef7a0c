use zeronorm_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported placement: {0}")]
    Unsupported(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by a bad configuration rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Tensor(TensorError::Config(_)) | Error::Unsupported(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
