use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty sentence")]
    EmptySentence,

    #[error("{path}:{line}: malformed corpus line: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("word id {0} does not occur in the sentence")]
    WordNotInSentence(u32),

    #[error("corpus has zero total token frequency")]
    ZeroFrequency,

    #[error("invalid bucket count {m} for sentence of length {len}")]
    InvalidBucketCount { m: usize, len: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("diffusion step {t} out of range [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("invalid control spec: {0}")]
    InvalidControl(String),

    #[error("classifier kind {classifier} cannot score control kind {control}")]
    ClassifierMismatch {
        classifier: &'static str,
        control: &'static str,
    },

    #[error("no labels available: {0}")]
    NoLabels(String),

    #[error("empty candidate list")]
    NoCandidates,

    #[error("empty outputs")]
    EmptyOutputs,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used for machine-parsable CLI failures and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCorpus => "empty_corpus",
            Error::EmptySentence => "empty_sentence",
            Error::MalformedLine { .. } => "malformed_line",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::WordNotInSentence(_) => "word_not_in_sentence",
            Error::ZeroFrequency => "zero_frequency",
            Error::InvalidBucketCount { .. } => "invalid_bucket_count",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::NonFinite(_) => "non_finite",
            Error::Shape(_) => "shape",
            Error::Diverged { .. } => "diverged",
            Error::InvalidControl(_) => "invalid_control",
            Error::ClassifierMismatch { .. } => "classifier_mismatch",
            Error::NoLabels(_) => "no_labels",
            Error::NoCandidates => "no_candidates",
            Error::EmptyOutputs => "empty_outputs",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
