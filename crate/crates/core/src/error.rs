use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: label {label:?} is not in the vocabulary of dataset {dataset:?}")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        dataset: String,
        label: String,
    },

    #[error("non-textual label {0:?}: labels must contain at least one alphabetic character")]
    NonTextualLabel(String),

    #[error("{path}:{line}: empty text")]
    EmptyText { path: PathBuf, line: usize },

    #[error("dataset {dataset:?}: declared {declared_train}/{declared_test} train/test examples, found {found_train}/{found_test}")]
    CountMismatch {
        dataset: String,
        declared_train: usize,
        declared_test: usize,
        found_train: usize,
        found_test: usize,
    },

    #[error("dataset {dataset:?}: duplicate label {label:?} in vocabulary")]
    DuplicateLabel { dataset: String, label: String },

    #[error("label {0:?} has no entry in the rewrite table")]
    UnmappedLabel(String),

    #[error("labels {sources:?} all map to {target:?} but the target is not flagged as a merge")]
    LabelCollision { sources: Vec<String>, target: String },

    #[error("dataset {dataset:?}: {reason}")]
    Normalization { dataset: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("model mode mismatch: expected {expected}, got {actual}")]
    ModeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("all positions are masked")]
    FullyMasked,

    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),

    #[error("aspect already injected")]
    DoubleInjection,

    #[error("unknown aspect {0:?}")]
    UnknownAspect(String),

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("answer {0:?} is not one of the prompt options")]
    AnswerNotInOptions(String),

    #[error("unknown template {0:?}")]
    UnknownTemplate(String),

    #[error("corpus spans a single aspect; aspect pre-training needs at least two")]
    SingleAspect,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("stage {stage} ({name}) failed")]
    Stage {
        stage: usize,
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
