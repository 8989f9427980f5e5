use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("infeasible CTC target: {frames} frames cannot realize a target of length {target_len} with {repeats} adjacent repeats")]
    InfeasibleTarget {
        frames: usize,
        target_len: usize,
        repeats: usize,
    },

    #[error("unknown phone id {id} (inventory size {inventory})")]
    UnknownPhone { id: u32, inventory: usize },

    #[error("unknown phone symbol '{0}'")]
    UnknownPhoneSymbol(String),

    #[error("duplicate keyword name '{0}'")]
    DuplicateKeyword(String),

    #[error("unknown keyword '{0}'")]
    UnknownKeyword(String),

    #[error("word '{0}' not found in lexicon")]
    MissingWord(String),

    #[error("unknown utterance id '{0}'")]
    UnknownUtterance(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("model file section '{0}' is missing")]
    MissingSection(&'static str),

    #[error("sampling window: frame {frame} is before window size {window}")]
    Window { frame: usize, window: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InsufficientFrames { .. } => "insufficient_frames",
            Error::InfeasibleTarget { .. } => "infeasible_target",
            Error::UnknownPhone { .. } => "unknown_phone",
            Error::UnknownPhoneSymbol(_) => "unknown_phone_symbol",
            Error::DuplicateKeyword(_) => "duplicate_keyword",
            Error::UnknownKeyword(_) => "unknown_keyword",
            Error::MissingWord(_) => "missing_word",
            Error::UnknownUtterance(_) => "unknown_utterance",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Diverged(_) => "diverged",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Format { .. } => "format",
            Error::MissingSection(_) => "missing_section",
            Error::Window { .. } => "window",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
