use thiserror::Error;

/// Errors raised by model fitting, prediction and the optimization loop.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix `{0}` is not positive definite even after maximum jitter")]
    NotPositiveDefinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank of the centered data is {achievable}, cannot extract {requested} principal directions")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("negative predictive variance {0:e}")]
    NegativeVariance(f64),

    #[error("all log-evidences are -inf, weights are undefined")]
    DegenerateEvidence,

    #[error("every acquisition candidate coincides with a sampled point; enlarge the space or loosen the exclusion radius")]
    AllCandidatesExcluded,

    #[error("no submodel could be fitted: {0}")]
    NoSubmodels(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
