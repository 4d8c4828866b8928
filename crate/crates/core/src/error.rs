//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid batch design: {0}")]
    InvalidDesign(String),

    #[error("invalid feature data: {0}")]
    InvalidData(String),

    #[error("invalid model parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid missing-data mechanism: {0}")]
    InvalidMechanism(String),

    #[error("dataset rejected: {}", .0.join("; "))]
    DatasetRejected(Vec<String>),

    /// A covariance that must be positive definite failed to factorize.
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// The fixed-effect normal equations are singular.
    #[error("fixed-effect design is rank deficient; column {column} is collinear with earlier columns")]
    RankDeficient { column: usize },

    #[error("numeric integration failed to converge after {nodes} nodes (relative change {change:.3e})")]
    Quadrature { nodes: usize, change: f64 },

    #[error("mechanism estimation failed: {0}")]
    MechanismEstimation(String),

    /// The mechanism assigns probability one to missingness while the batch was observed.
    #[error("mechanism is inconsistent with the data: batch {batch} is observed but has missing probability 1")]
    InconsistentMechanism { batch: usize },

    #[error("fit failed at iteration {iteration}: {source}")]
    FitFailed {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    /// Variance components grew without bound; the likelihood has no maximum
    /// at this mechanism.
    #[error("variance components diverged (total variance {total_variance:.3e})")]
    Diverged { total_variance: f64 },

    #[error("zero variance for coefficient {0}")]
    ZeroVariance(usize),

    #[error("invalid test configuration: {0}")]
    InvalidTest(String),

    #[error("degenerate simulated dataset: {0}")]
    DegenerateDataset(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Errors caused by malformed user input rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Input(_)
                | Error::Io { .. }
                | Error::InvalidDesign(_)
                | Error::InvalidData(_)
                | Error::DatasetRejected(_)
                | Error::InvalidScenario(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
