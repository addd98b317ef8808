use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The bytes on disk do not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input carrying unusable values (NaN, infinities).
    #[error("data error: {0}")]
    Data(String),

    /// One or more record invariants are violated.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step} (batch {batch}): {detail}")]
    Divergence {
        step: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(vec![msg.into()])
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Config(_)
                | Error::Format(_)
                | Error::Data(_)
                | Error::Input(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
