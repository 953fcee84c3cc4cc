use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("channel '{channel}' has zero variance on the training range")]
    ZeroVariance { channel: String },

    #[error("channel count {requested} out of range 1..={available}")]
    ChannelRange { requested: usize, available: usize },

    #[error(
        "surrogate weight sum w_alpha+w_beta = {value:e} on channel {channel} is below the \
         floor {floor:e}; the reconstruction denominator has collapsed"
    )]
    DenominatorFloor {
        channel: usize,
        value: f64,
        floor: f64,
    },

    #[error("normal equations are singular; use ridge_lambda > 0")]
    Singular,

    #[error("non-finite gradient in tensor '{tensor}'")]
    NonFinite { tensor: String },

    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("no usable channel pairs for correlation (all degenerate or fewer than two channels)")]
    NoPairs,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
