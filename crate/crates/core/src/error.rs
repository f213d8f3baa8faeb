use thiserror::Error;

use crate::extrapolation::RdfcLog;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("size limit exceeded: {what} ({actual} > {limit})")]
    Size {
        what: String,
        actual: usize,
        limit: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("repetition period stagnated on the {axis} axis at N = {period}")]
    Stagnation {
        axis: crate::extrapolation::Axis,
        period: usize,
        log: RdfcLog,
    },

    #[error("correction did not converge within {cap} iterations on the {axis} axis")]
    IterationCap {
        axis: crate::extrapolation::Axis,
        cap: usize,
        log: RdfcLog,
    },

    #[error("repetition score undefined: {0}")]
    UndefinedScore(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
