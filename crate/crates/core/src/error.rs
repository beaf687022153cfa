use thiserror::Error;

/// Errors produced anywhere in the pipeline. The CLI maps variants onto
/// process exit codes, so keep the classification stable.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor primitive was applied to inputs with incompatible shapes.
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    /// A corpus record violated an invariant (bad bbox, empty caption, ...).
    #[error("corpus record {index}: field `{field}`: {message}")]
    Corpus {
        index: usize,
        field: &'static str,
        message: String,
    },

    /// Configuration failed validation; `field` names the offending key.
    #[error("config: field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A stage was invoked before the artifact it consumes exists.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// An upstream artifact changed after a downstream one was built from it.
    #[error("stale artifact: {0}")]
    Stale(String),

    /// A verification check (gradient check, property suite, ...) failed.
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// Malformed or incompatible checkpoint file.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
