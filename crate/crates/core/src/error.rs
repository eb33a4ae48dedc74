use std::path::PathBuf;

use thiserror::Error;

use crate::fitting::ExpFit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("exponential fit did not converge after {iterations} iterations (best residual rms {})", best.residual_rms)]
    NotConverged { iterations: usize, best: Box<ExpFit> },

    #[error("unit mismatch: fit uses {fit} units, query uses {query} units")]
    UnitMismatch { fit: String, query: String },

    #[error("axis index {index} outside 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("count {0} is not on the axis")]
    CountNotOnAxis(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unmatched ids: {}", .0.join(", "))]
    UnmatchedIds(Vec<String>),

    #[error("missing fit for model {model} and index {index}")]
    MissingFit { model: String, index: String },

    #[error("predictor failure: {0}")]
    Predictor(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(left: (usize, usize), right: (usize, usize)) -> Self {
        Error::DimensionMismatch {
            left_width: left.0,
            left_height: left.1,
            right_width: right.0,
            right_height: right.1,
        }
    }

    /// Process exit code for the command line: 1 usage, 2 data, 3 predictor.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::UnitMismatch { .. } => 1,
            Error::Predictor(_) => 3,
            _ => 2,
        }
    }
}
