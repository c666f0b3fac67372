use thiserror::Error;

/// Every failure the toolkit can report.
///
/// Variants fall into three families (configuration, numerical failure,
/// non-convergence) which the command-line front end maps onto distinct
/// exit codes through [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("trajectory diverged at t = {t} (|alpha| = {magnitude:e})")]
    Divergence { t: f64, magnitude: f64 },

    #[error("no sign change of the shooting residual for |gamma| <= {bound:e}; branch point unreachable in the given duration")]
    NoBracket { bound: f64 },

    #[error("bisection did not reach |residual| < {tol:e} after {iterations} iterations (last residual {residual:e})")]
    SlowConvergence { iterations: usize, residual: f64, tol: f64 },

    #[error("driving discontinuous at the junction: mismatch {mismatch:e} exceeds {tol:e}")]
    ContinuityViolation { mismatch: f64, tol: f64 },

    #[error("coherent state truncated too aggressively: norm correction {correction:e}")]
    TruncationTooSmall { correction: f64 },

    #[error("population {population:e} in the top Fock levels exceeds {threshold:e} at t = {t}")]
    TruncationOverflow { t: f64, population: f64, threshold: f64 },

    #[error("density matrix lost positivity at t = {t} (min eigenvalue {min_eigenvalue:e})")]
    PositivityLoss { t: f64, min_eigenvalue: f64 },

    #[error("time step {dt:e} exceeds the explicit stability limit {limit:e}")]
    UnstableStep { dt: f64, limit: f64 },

    #[error("{what} did not converge: {detail}")]
    NotConverged { what: String, detail: String },

    #[error("series never settles below threshold {threshold:e}")]
    NeverCrosses { threshold: f64 },

    #[error("phase-space domain too small: boundary band {band:e} vs peak {peak:e}")]
    DomainTooSmall { band: f64, peak: f64 },

    #[error("linear solver stalled after {iterations} iterations (relative residual {residual:e})")]
    SolverStall { iterations: usize, residual: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure family used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    NonConvergence,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter { .. } | Error::Config(_) | Error::DimensionMismatch { .. } => {
                ErrorKind::Config
            }
            Error::Divergence { .. }
            | Error::ContinuityViolation { .. }
            | Error::TruncationTooSmall { .. }
            | Error::TruncationOverflow { .. }
            | Error::PositivityLoss { .. }
            | Error::UnstableStep { .. }
            | Error::DomainTooSmall { .. } => ErrorKind::Numerical,
            Error::NoBracket { .. }
            | Error::SlowConvergence { .. }
            | Error::NotConverged { .. }
            | Error::NeverCrosses { .. }
            | Error::SolverStall { .. } => ErrorKind::NonConvergence,
            Error::Io(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
