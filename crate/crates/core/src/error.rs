use thiserror::Error;

/// Errors raised by the model, solvers and evaluators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state out of domain: y2 = {y2} is negative and clamping is disabled")]
    OutOfDomain { y2: f64 },

    #[error("return covariance is singular at y2 = {y2} (variance {variance:e})")]
    SingularCovariance { y2: f64, variance: f64 },

    #[error("division hazard: |u| = {u:e} is below the 1e-8 guard")]
    DivisionHazard { u: f64 },

    #[error("non-finite value in parameter gradient")]
    NonFiniteGradient,

    #[error("training aborted at update {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("newton did not converge at level {level} after {iterations} iterations (residual {residual:e})")]
    NewtonNonConvergence {
        level: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("singular jacobian at level {level}")]
    SingularJacobian { level: usize },

    #[error("level {level}: {source}")]
    AtLevel {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate surface: u = {u:e} is below the 1e-8 guard")]
    DegenerateSurface { u: f64 },

    #[error("value function is not concave in wealth: V_xx = {vxx:e}")]
    NotConcave { vxx: f64 },

    #[error("wealth must be positive, got {0}")]
    NonPositiveWealth(f64),

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
