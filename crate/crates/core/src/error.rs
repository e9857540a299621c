use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {point:?} (or its finite-difference stencil) leaves the chart bounds")]
    Domain { point: Vec<f64> },

    #[error("direction is too close to the zero section (|y| = {norm:e})")]
    DegenerateDirection { norm: f64 },

    #[error("Randers condition violated: |omega| = {norm} >= 1 at {point:?}")]
    RandersCondition { norm: f64, point: Vec<f64> },

    #[error("metric is not positive definite at {point:?} (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { point: Vec<f64>, min_eigenvalue: f64 },

    #[error("conformal factor is not positive at {point:?} (phi = {value})")]
    NonPositiveConformal { point: Vec<f64>, value: f64 },

    #[error("beta is not positive at {point:?} (beta = {value})")]
    NonPositiveBeta { point: Vec<f64>, value: f64 },

    #[error("line search failed to find a descent step")]
    NoDescent,

    #[error("curve is not a geodesic (residual {residual:e} > {threshold:e})")]
    NotAGeodesic { residual: f64, threshold: f64 },

    #[error("cone membership and explicit construction disagree: {0}")]
    Inconsistent(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
