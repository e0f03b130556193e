use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("step {step} out of range for schedule with {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("backbone unavailable: {0}")]
    BackboneUnavailable(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("eliminate direction has zero norm ({norm:e}); attribute substitution must be skipped")]
    ZeroEliminateDirection { norm: f64 },

    #[error("vision-language model unavailable: {0}")]
    VlmUnavailable(String),

    #[error("malformed vision-language model response: {0}")]
    MalformedVlmResponse(String),

    #[error("only {available} distinct prompts can be composed, {requested} requested")]
    InsufficientCombinations { available: usize, requested: usize },

    #[error("identity token found in regularization prompt {0:?}")]
    IdentityTokenLeak(String),

    #[error("attribute {word:?} ({category}) is not in the dictionary")]
    UnknownAttribute { category: String, word: String },

    #[error("{failed} of {total} regularization samples failed to generate")]
    GenerationFailed { failed: usize, total: usize },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("sample ids not aligned; missing: {}", .0.join(", "))]
    IdMisalignment(Vec<String>),

    #[error("empty result set")]
    EmptyResults,

    #[error("insufficient backgrounds: need {needed}, have {available}")]
    InsufficientBackgrounds { needed: usize, available: usize },

    #[error("unreadable annotations:\n  {}", .0.join("\n  "))]
    UnreadableAnnotations(Vec<String>),

    #[error("placement does not match background geometry: {0}")]
    PlacementMismatch(String),

    #[error("request {index} failed: {source}")]
    RequestFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("child run {name} exited with code {code}")]
    ChildRun { name: String, code: i32 },

    #[error("invalid container: {0}")]
    Container(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
