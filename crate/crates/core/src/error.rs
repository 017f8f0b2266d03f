use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants map onto the failure classes of each stage so callers (the CLI,
/// the HTTP layer) can decide between usage and runtime failures without
/// string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed identifier at byte offset {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("binding mismatch for {kind} slots: expected {expected}, given {given}")]
    Binding {
        kind: &'static str,
        expected: usize,
        given: usize,
    },

    #[error("invalid binding: {0}")]
    InvalidBinding(String),

    #[error("instruction needs {tokens} tokens but the context limit is {max_length}")]
    Length { tokens: usize, max_length: usize },

    #[error("insertion error: {0}")]
    Insertion(String),

    #[error("sequence overflow: {needed} tokens needed, {max_length} allowed after dropping {dropped_pad} padding tokens")]
    Overflow {
        needed: usize,
        max_length: usize,
        dropped_pad: usize,
    },

    #[error("scale weighting error: {0}")]
    Weighting(String),

    #[error("blend error: {0}")]
    Blend(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("timestep {t} out of range for a schedule with {num_steps} steps")]
    Timestep { t: usize, num_steps: usize },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("pipeline stage `{stage}` incomplete: {reason}")]
    StageIncomplete { stage: String, reason: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the caller's input rather than by the
    /// environment or a backend.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Binding { .. }
                | Error::InvalidBinding(_)
                | Error::Length { .. }
                | Error::Insertion(_)
                | Error::Overflow { .. }
                | Error::Weighting(_)
                | Error::Blend(_)
                | Error::Config(_)
                | Error::Input(_)
                | Error::Timestep { .. }
                | Error::Dataset(_)
                | Error::Validation(_)
        )
    }
}
