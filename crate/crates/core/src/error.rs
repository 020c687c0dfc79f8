use thiserror::Error;

/// Errors surfaced by the dereverberation engine and its tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("channel length mismatch: channel {channel} has {len} samples, expected {expected}")]
    ChannelLengthMismatch {
        channel: usize,
        len: usize,
        expected: usize,
    },

    #[error("bin count mismatch: got {got}, expected {expected}")]
    BinCountMismatch { got: usize, expected: usize },

    #[error("at least {required} channels are required, got {got}")]
    TooFewChannels { required: usize, got: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical breakdown: {0}")]
    Numerical(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
