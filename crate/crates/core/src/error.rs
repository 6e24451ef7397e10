use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid task {task}: {message}")]
    Validation { task: String, message: String },

    #[error("label `{label}` has no surface form in verbalizer `{verbalizer}`")]
    UnmappedLabel { verbalizer: String, label: String },

    #[error("verbalizer `{verbalizer}` has {got} labels but the task has {expected}")]
    ArityMismatch {
        verbalizer: String,
        expected: usize,
        got: usize,
    },

    #[error("input field `{0}` is missing from the instance")]
    MissingField(String),

    #[error("template `{0}` has no instruction segment to mask")]
    NoInstruction(String),

    #[error("label index {index} out of range for {count} options")]
    LabelIndex { index: usize, count: usize },

    #[error("text contains a reserved marker: {0:?}")]
    ReservedGlyph(String),

    #[error("{which} sequence has {len} tokens, limit is {max}")]
    TooLong {
        which: &'static str,
        len: usize,
        max: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("no candidate for an incorrect label: {0}")]
    NoNegative(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
