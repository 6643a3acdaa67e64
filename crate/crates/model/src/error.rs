use thiserror::Error;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),

    #[error("unknown dataset id {id:?}; registered: {registered:?}")]
    UnknownDatasetId { id: String, registered: Vec<String> },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("embedder: {0}")]
    Embedder(String),

    #[error(transparent)]
    Core(#[from] aural_core::CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
