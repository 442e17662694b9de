use nalgebra::DMatrix;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("closed loop is not stable (spectral radius {rho})")]
    Unstable { rho: f64 },

    #[error("state diverged at step {step} (norm {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("constraint direction is degenerate (q'Σq = {0:e})")]
    DegenerateDirection(f64),

    #[error("exploration covariance must be positive definite")]
    ExplorationRequired,

    #[error("step guard exhausted after {halvings} halvings (last alpha {alpha:e}, value {value})")]
    StepFailure {
        halvings: usize,
        alpha: f64,
        value: f64,
        gain: DMatrix<f64>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("ill-conditioned: {0}")]
    Conditioning(String),

    #[error("insufficient data: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("sampling failed: {0}")]
    Sampling(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by numerics (instability, divergence, solver
    /// breakdown) as opposed to malformed input.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::Dimension(_) | Error::InvalidArgument(_) | Error::NonFinite(_)
        )
    }
}

/// An error raised part-way through an iterative procedure, carrying the
/// trace recorded up to the failure.
#[derive(Debug, Clone, Error)]
#[error("{source} (after {} recorded iterations)", .len)]
pub struct Traced<T> {
    pub trace: T,
    pub len: usize,
    #[source]
    pub source: Error,
}
