use thiserror::Error;

/// Errors raised by the design and analysis engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("nuisance design is rank deficient: {0}")]
    RankDeficient(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("stage 1 carries no information about the treatment effect")]
    ZeroStageOneInformation,

    #[error("stage 2 has zero combination weight but positive planned information")]
    ZeroStageTwoWeight,

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("quadrature did not converge on [{lo}, {hi}]")]
    QuadratureNonConvergence { lo: f64, hi: f64 },

    #[error("stage 2 design grid is empty")]
    EmptyGrid,

    #[error("target power {target} is unachievable; maximum attainable power is {max_power:.4}")]
    TargetUnachievable { target: f64, max_power: f64 },

    #[error("objective vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("no stage 1 candidate is feasible")]
    AllInfeasible,

    #[error("parameters are not estimable: {0}")]
    NotEstimable(String),
}

pub type Result<T> = std::result::Result<T, Error>;
