use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("trajectory became non-finite at step {step}")]
    NonFinite { step: usize },

    #[error("matrix is not stable (spectral radius {rho})")]
    UnstableMatrix { rho: f64 },

    #[error("Riccati iteration did not converge within {max_iters} iterations")]
    NonConvergence { max_iters: usize },

    #[error("innovation covariance is singular or not positive-definite")]
    SingularInnovationCov,

    #[error("no feasible gain found after {retries} retries")]
    FeasibleSampleExhausted { retries: usize },

    #[error("regressor stack is rank-deficient")]
    SingularRegression,

    #[error("initial gain is infeasible: {0}")]
    InfeasibleStart(String),

    #[error("no stable point in the grid")]
    EmptyFeasibleGrid,

    #[error("operation only supports n = q = 1, got n = {n}, q = {q}")]
    UnsupportedDimension { n: usize, q: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data file, line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
