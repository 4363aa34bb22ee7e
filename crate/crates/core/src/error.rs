use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("corpus {0} is empty")]
    EmptyCorpus(PathBuf),

    #[error("{path}: malformed line {line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("instance {index} encodes to the zero vector")]
    ZeroEmbedding { index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {0} has no instances")]
    EmptyClass(usize),

    #[error("no negative class available for anchor {0}")]
    NoNegative(usize),

    #[error("negative for instance {0} shares its label")]
    NegativeSharesLabel(usize),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty test set")]
    EmptyTestSet,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used in the CLI's machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::MalformedLine { .. } => "malformed_line",
            Error::InvalidSplit(_) => "invalid_split",
            Error::ZeroEmbedding { .. } => "zero_embedding",
            Error::NonFinite(_) => "non_finite",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptyClass(_) => "empty_class",
            Error::NoNegative(_) => "no_negative",
            Error::NegativeSharesLabel(_) => "negative_shares_label",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyTestSet => "empty_test_set",
        }
    }
}
