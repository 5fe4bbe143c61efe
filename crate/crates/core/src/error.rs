use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(&'static str),

    #[error("position {position} does not follow the cached maximum {cached_max}")]
    PositionCollision { position: usize, cached_max: usize },

    #[error("block of {len} tokens ends beyond max_position {max}")]
    BlockTooLong { len: usize, max: usize },

    #[error("cache ordering violation: {0}")]
    Ordering(String),

    #[error("interval {0} is not complete")]
    IntervalIncomplete(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("vocabulary overflow: {needed} ids needed, vocab_size is {vocab_size}")]
    VocabOverflow { needed: usize, vocab_size: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Short machine-readable category used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Backward(_) => "backward",
            Error::PositionCollision { .. } => "position_collision",
            Error::BlockTooLong { .. } => "block_too_long",
            Error::Ordering(_) => "ordering",
            Error::IntervalIncomplete(_) => "interval_incomplete",
            Error::Empty(_) => "empty_input",
            Error::VocabOverflow { .. } => "vocab_overflow",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
