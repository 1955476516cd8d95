use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid loss specification: {0}")]
    InvalidLoss(String),

    #[error("loss argument {0} is outside the domain t >= 0")]
    NegativeArgument(f64),

    #[error("degenerate scale: all distances are zero")]
    DegenerateScale,

    #[error("zero bandwidth: pairwise distances have median zero")]
    ZeroBandwidth,

    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),

    #[error("genotype value {value} at row {row}, column {col} is not in {{0, 1, 2}}")]
    InvalidGenotype { row: usize, col: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("KIRWLS weights are all zero: every sample was rejected by the loss")]
    DegenerateWeights,

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("covariance matrix is not positive definite even with jitter {0:e}")]
    SingularCovariance(f64),

    #[error("no ReML start converged")]
    NoConvergence,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("perfect fit: null residual variance is zero")]
    PerfectFit,

    #[error("null model fit did not converge")]
    NullFitNotConverged,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("missing value in {what} at feature `{feature}`")]
    MissingValue { what: String, feature: String },

    #[error("empty sample intersection between {left_name} ({left} samples) and {right_name} ({right} samples)")]
    EmptyIntersection {
        left_name: String,
        left: usize,
        right_name: String,
        right: usize,
    },

    #[error("{failed} of {total} replicates failed (more than 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
