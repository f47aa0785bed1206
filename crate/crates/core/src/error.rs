use thiserror::Error;

/// Errors raised by coupling construction, sampling, analysis and optimization.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CouplingError {
    /// Equicorrelation outside the feasible interval `[-1/(k-1), 1]`.
    #[error("infeasible correlation c = {c} for k = {k}; valid interval is [{lower}, {upper}]")]
    Feasibility {
        k: usize,
        c: f64,
        lower: f64,
        upper: f64,
    },

    #[error("numerical rank {rank} exceeds requested factor width r = {r}")]
    Rank { rank: usize, r: usize },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("invalid coupling spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The optimizer produced a non-finite objective or gradient.
    #[error("objective estimate became non-finite at step {step}")]
    Divergence { step: usize },
}

impl CouplingError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CouplingError::InvalidSpec(msg.into())
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        CouplingError::DimensionMismatch(msg.into())
    }
}

pub type Result<T, E = CouplingError> = std::result::Result<T, E>;
