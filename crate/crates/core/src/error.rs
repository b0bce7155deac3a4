//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown client id {0}")]
    UnknownClient(usize),

    #[error("empty shard")]
    EmptyShard,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("round {round}: {source}")]
    AtRound {
        round: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach the round index at which an error surfaced.
    pub fn at_round(self, round: u64) -> Error {
        Error::AtRound {
            round,
            source: Box::new(self),
        }
    }

    /// True for user-input problems (bad config, bad file format), which the
    /// CLI maps to exit code 2. Runtime failures map to exit code 1.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::Format { .. } => true,
            Error::AtRound { source, .. } => source.is_user_error(),
            _ => false,
        }
    }
}
