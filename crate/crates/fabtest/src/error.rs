//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FabError>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum FabError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no residual degrees of freedom")]
    NoResidualDof,

    #[error("prior covariance degenerate")]
    DegenerateCovariance,

    #[error("permutation null degenerate")]
    DegeneratePermutation,

    #[error("F-test degenerate: power equals level")]
    DegenerateFTest,

    #[error("hypothesis vacuous: constrained subspace has no orthogonal complement")]
    VacuousHypothesis,

    #[error("degenerate observation")]
    DegenerateObservation,

    #[error("target vector not in the column space of the constraint matrix")]
    TargetNotInColumnSpace,

    #[error("variance model degenerate: under-dispersed residuals (use the point-mass model)")]
    UnderDispersedResiduals,

    #[error("singular information matrix; deficient directions: {0}")]
    SingularInformation(String),

    #[error("non-finite statistic at draw {index}")]
    NonFiniteStatistic { index: usize },

    #[error("root finder failed to converge: {0} (consider a grid fallback)")]
    RootFindFailed(String),

    #[error("linking fit failed: {0}")]
    LinkingFailed(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FabError {
    fn from(e: std::io::Error) -> Self {
        FabError::Io(e.to_string())
    }
}
