//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FramuError {
    /// Structural mismatch: vector lengths, parameter shapes.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A precondition on values was violated (empty input, out-of-range knob).
    #[error("domain error in {context}: {message}")]
    Domain {
        context: &'static str,
        message: String,
    },

    /// A public operation produced NaN or infinity; the round is aborted.
    #[error("non-finite value produced in {context} at round {round}")]
    Numeric { context: &'static str, round: u32 },

    /// A config key failed validation.
    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    /// The config file itself could not be parsed.
    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// Lookup of a data point that was never emitted.
    #[error("unknown data point id {0}")]
    UnknownId(u64),

    /// A CSV input is missing a required column.
    #[error("schema error: missing column `{0}`")]
    Schema(String),

    /// Checkpoint decode/validation failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FramuError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FramuError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FramuError>;
