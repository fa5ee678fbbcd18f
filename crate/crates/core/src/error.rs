use thiserror::Error;

/// Errors raised by the calibration engine.
#[derive(Debug, Error)]
pub enum SoftcalError {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("sample is empty: no unit has delta = 1")]
    EmptySample,

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("loss {family} is undefined at w = {w}")]
    LossDomain { family: &'static str, w: f64 },

    #[error("z = {z} lies outside the conjugate domain of {family}")]
    ConjugateDomain { family: &'static str, z: f64 },

    #[error("unit {unit} leaves the conjugate domain (z = {z})")]
    UnitDomain { unit: usize, z: f64 },

    #[error("{what} is singular: rank {rank} of {dim} (rank gap {gap})", gap = .dim - .rank)]
    Singular {
        what: &'static str,
        rank: usize,
        dim: usize,
    },

    #[error("step halving could not keep iterate {iteration} inside the conjugate domain")]
    Infeasible { iteration: usize },

    #[error("solve did not converge; {0} requires a converged solve")]
    NotConverged(&'static str),

    #[error("cross-fitting failed on {failed} of {folds} folds")]
    CrossFit { failed: usize, folds: usize },

    #[error("cluster variance needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),

    #[error("cluster design: {0}")]
    Design(String),

    #[error("treatment arm {0} has no units in the sample")]
    EmptyArm(u8),

    #[error("{failed} of {reps} replicates failed (limit is 5%)")]
    TooManyFailures { failed: usize, reps: usize },

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for SoftcalError {
    fn from(e: csv::Error) -> Self {
        SoftcalError::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SoftcalError>;
