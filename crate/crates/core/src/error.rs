use thiserror::Error;

use crate::graph::VariableKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid dimensions: d = {d}, p = {p}")]
    InvalidDimensions { d: usize, p: usize },

    #[error("degenerate retraction: {0}")]
    DegenerateRetraction(String),

    #[error("variable {0} is referenced but not declared")]
    DanglingKey(VariableKey),

    #[error("variable {0} is declared more than once")]
    DuplicateKey(VariableKey),

    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("missing odometric edge between poses {0} and {1}")]
    MissingOdometry(usize, usize),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("objective became non-finite")]
    NonFiniteObjective,

    #[error("eigensolver did not converge after {iterations} iterations (best residual {residual:e})")]
    EigenNonConvergence { iterations: usize, residual: f64 },

    #[error("saddle escape found no sufficient decrease after {halvings} step halvings")]
    EscapeFailed { halvings: usize },

    #[error("rounding failed: {0}")]
    Rounding(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset contains no variables")]
    EmptyGraph,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
