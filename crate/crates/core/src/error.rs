use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least {need}")]
    InputTooShort { len: usize, need: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {stage}")]
    NonFinite { stage: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("need multichannel input")]
    NeedMultichannel,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn non_finite(stage: impl Into<String>) -> Self {
        Error::NonFinite { stage: stage.into() }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
