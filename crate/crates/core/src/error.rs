//! One error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("environment `{env_id}` invalid: {reason}")]
    InvalidEnvironment { env_id: String, reason: String },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("retry budget exhausted after {attempts} attempts: {context}")]
    RetryExhausted { attempts: usize, context: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("incompatible artifacts: {0}")]
    HashMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("output exists: {0} (pass --force to overwrite)")]
    OutputExists(String),

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable discriminant, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownNode(_) => "unknown_node",
            Error::InvalidEnvironment { .. } => "invalid_environment",
            Error::InvalidParams(_) => "invalid_params",
            Error::InvalidPath(_) => "invalid_path",
            Error::RetryExhausted { .. } => "retry_exhausted",
            Error::EmptyInput(_) => "empty_input",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::HashMismatch(_) => "hash_mismatch",
            Error::Parse(_) => "parse_error",
            Error::Config(_) => "config_error",
            Error::OutputExists(_) => "output_exists",
            Error::GradcheckFailed(_) => "gradcheck_failed",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
