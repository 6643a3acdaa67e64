use thiserror::Error;

pub type Result<T> = std::result::Result<T, AudioError>;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav format error in chunk {chunk:?}: {reason}")]
    Format { chunk: String, reason: String },

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("sample rate {got} Hz, expected {expected} Hz; resample first")]
    RateMismatch { expected: u32, got: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
