use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: std::borrow::Cow<'static, str>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in stage `{stage}`")]
    NonFinite { stage: &'static str },

    #[error("degenerate pose: key point {index} has depth {depth:e}")]
    DegeneratePose { index: usize, depth: f64 },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed image: {0}")]
    Image(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at {stage} iteration {iteration}: {reason}")]
    Training {
        stage: &'static str,
        iteration: usize,
        reason: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Dimension { .. }
                | Error::Checkpoint(_)
                | Error::Image(_)
                | Error::Dataset(_)
        )
    }
}
