use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("invalid grid spec: {0}")]
    InvalidGridSpec(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("frame {frame} out of range (scenario has {frames} frames)")]
    FrameOutOfRange { frame: usize, frames: usize },

    #[error("agent {id} not found")]
    AgentNotFound { id: u32 },

    #[error("trajectory horizon too short: need frames up to {needed}, have up to {available}")]
    HorizonTooShort { needed: usize, available: usize },

    #[error("unknown scenario template `{0}`")]
    UnknownTemplate(String),

    #[error("scenario parse error at line {line}, column {column}: {message}")]
    ScenarioParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("scenario invariant violated in `{field}`: {reason}")]
    ScenarioInvariant { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("gradient check failed for parameter {index}: analytic {analytic:e}, numeric {numeric:e}, relative error {rel_error:e}")]
    GradientCheck {
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_error: f64,
    },

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
