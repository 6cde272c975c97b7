use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op} expects {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any tensor that requires a gradient")]
    DetachedGraph,

    #[error("parameter {index} has no gradient")]
    MissingGradient { index: usize },

    #[error("unusable pair: {0}")]
    UnusablePair(String),

    #[error("average precision is undefined without positives")]
    NoPositives,

    #[error("descriptor norm {norm} deviates from 1 by more than {tolerance}")]
    NotUnitNorm { norm: f64, tolerance: f64 },

    #[error("degenerate homography after {attempts} attempts")]
    DegenerateHomography { attempts: usize },

    #[error("non-finite loss at iteration {iteration}")]
    Diverged { iteration: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
