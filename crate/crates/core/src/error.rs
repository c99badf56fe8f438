use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unit index {index} outside 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("self-loop on unit {unit}")]
    SelfLoop { unit: usize },

    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),

    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("design matrix is rank deficient")]
    SingularDesign,

    #[error("prior data contains no periods")]
    EmptyPriorData,

    #[error("log-determinant cache missing or built for a different epsilon")]
    MissingLogDetCache,

    #[error("candidate sequence required for the LCAR model")]
    MissingSequence,

    #[error("deviance trace is empty")]
    EmptyTrace,

    #[error("residuals are constant; Moran's I undefined")]
    ConstantResiduals,

    #[error("covariance matrix not positive definite after jitter {jitter:e}")]
    SingularCovariance { jitter: f64 },

    #[error("could not bracket range parameter for target correlation {target}")]
    NoBracket { target: f64 },

    #[error("iteratively reweighted least squares did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("inconsistent units: {0}")]
    InconsistentUnits(String),

    #[error("expected count must be positive (unit {unit}, value {value})")]
    NonPositiveExpected { unit: usize, value: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularCovariance { .. }
                | Error::NoBracket { .. }
                | Error::NonConvergence { .. }
                | Error::SingularDesign
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
