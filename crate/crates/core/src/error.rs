use thiserror::Error;

/// Errors produced by the estimation and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The sample has fewer than two nonzero taxa and carries no log-ratio information.
    #[error("sample has fewer than two nonzero taxa")]
    DegenerateSample,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no discrete probability mass for presence pattern {0}")]
    MissingMass(String),

    #[error("covariance matrix is numerically singular or not positive definite")]
    SingularCovariance,

    #[error("no subject has two or more nonzero taxa")]
    EmptySystem,

    #[error("design is rank deficient ({rank} of {columns} columns independent)")]
    RankDeficient { rank: usize, columns: usize },

    #[error("linear predictors are constant, signal-to-noise ratio is undefined")]
    NoSignal,

    #[error("index {index} out of range (valid: {lower}..={upper})")]
    IndexOutOfRange {
        index: usize,
        lower: usize,
        upper: usize,
    },

    /// Coordinate descent increased its objective across a sweep. This is a solver
    /// defect and is never swallowed.
    #[error("coordinate descent objective increased from {before} to {after} at lambda {lambda}")]
    Divergence { before: f64, after: f64, lambda: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
