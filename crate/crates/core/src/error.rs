use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss is undefined: every target position is ignored")]
    UndefinedLoss,

    #[error("vision encoder has {0} layers, at least 6 are required for tap selection")]
    TooShallowEncoder(usize),

    #[error("bbox parse error at byte {pos}: {msg}")]
    BBoxParse { pos: usize, msg: String },

    #[error("template for {subtype} is missing slot {{{placeholder}}}")]
    MissingSlot {
        subtype: String,
        placeholder: String,
    },

    #[error("unknown character {ch:?} (U+{code:04X}) at char index {pos}")]
    UnknownChar { ch: char, code: u32, pos: usize },

    #[error("checkpoint header is corrupt: {0}")]
    CorruptHeader(String),

    #[error("checkpoint payload is truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("training diverged at step {step}: non-finite gradient in {param}")]
    Divergence { step: usize, param: String },

    #[error("stage {stage} requires a completed {missing} stage in the loaded parameters")]
    MissingPrerequisite { stage: String, missing: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
