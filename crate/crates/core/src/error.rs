//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement; `context` names the operation and offending dims.
    #[error("shape error: {context}")]
    Shape { context: String },

    /// Annotation violates its invariants (non-positive extents, out-of-bounds keypoint, ...).
    #[error("invalid annotation: {context}")]
    InvalidAnnotation { context: String },

    /// Non-finite values or otherwise invalid numerics reached an operation boundary.
    #[error("numeric error: {context}")]
    Numeric { context: String },

    /// Attention token count exceeds the configured maximum.
    #[error(
        "attention capacity exceeded: {tokens} tokens > {max_tokens} allowed; \
         enable pooling (pool_over_capacity) or raise max_tokens"
    )]
    Capacity { tokens: usize, max_tokens: usize },

    /// Bad configuration value or unknown option name.
    #[error("config error: {context}")]
    Config { context: String },

    /// Scene synthesis could not place the requested number of objects.
    #[error(
        "placement failure: placed {achieved} of {requested} objects without \
         exceeding the occlusion target"
    )]
    Placement { requested: usize, achieved: usize },

    /// Dataset or checkpoint record failed validation on load.
    #[error("load error: {context}")]
    Load { context: String },

    /// Evaluation input mismatch (unmatched image ids, empty test set, ...).
    #[error("eval error: {context}")]
    Eval { context: String },

    /// Checkpoint format or config/version mismatch.
    #[error("checkpoint error: {context}")]
    Checkpoint { context: String },

    /// Training aborted (non-finite loss); the last good checkpoint is retained.
    #[error("training aborted at step {step}: {context}")]
    TrainAborted { step: usize, context: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {context}")]
    Image { path: String, context: String },
}

impl Error {
    pub fn shape(context: impl Into<String>) -> Self {
        Error::Shape { context: context.into() }
    }
    pub fn annotation(context: impl Into<String>) -> Self {
        Error::InvalidAnnotation { context: context.into() }
    }
    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric { context: context.into() }
    }
    pub fn config(context: impl Into<String>) -> Self {
        Error::Config { context: context.into() }
    }
    pub fn load(context: impl Into<String>) -> Self {
        Error::Load { context: context.into() }
    }
    pub fn eval(context: impl Into<String>) -> Self {
        Error::Eval { context: context.into() }
    }
    pub fn checkpoint(context: impl Into<String>) -> Self {
        Error::Checkpoint { context: context.into() }
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
