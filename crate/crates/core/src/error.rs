use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("degenerate rank-one update: denominator {denominator:e}")]
    DegenerateUpdate { denominator: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("decision set is empty")]
    EmptyDecisionSet,

    #[error("global design matrix is singular (min eigenvalue {min_eig:e})")]
    SingularGlobalMatrix { min_eig: f64 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("dataset is empty{}", .0.as_ref().map(|s| format!(": {s}")).unwrap_or_default())]
    EmptyDataset(Option<String>),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("user {user} has insufficient ratings: {reason}")]
    InsufficientRatings { user: usize, reason: String },

    #[error("no valid clusters: {0}")]
    NoValidClusters(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
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

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParams(_) | Error::Json(_) => 2,
            Error::EmptyDataset(_)
            | Error::Parse { .. }
            | Error::InsufficientRatings { .. }
            | Error::NoValidClusters(_)
            | Error::Io { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
