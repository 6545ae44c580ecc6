use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the solver pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{field}: matrix is not symmetric positive definite")]
    NotPositiveDefinite { field: String },

    #[error("{field}: origin is not in the interior of the set")]
    OriginNotInterior { field: String },

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    DareNotConverged { iterations: usize, residual: f64 },

    #[error("closed loop is not stable (spectral radius {0})")]
    UnstableClosedLoop(f64),

    #[error("linear program is infeasible")]
    LpInfeasible,

    #[error("linear program is unbounded")]
    LpUnbounded,

    #[error("invariant set iteration exceeded {0} steps")]
    IterationLimit(usize),

    #[error("terminal set is empty (gamma too large?)")]
    EmptyTerminalSet,

    #[error("quadratic program is infeasible")]
    QpInfeasible,

    #[error("quadratic program solver stalled after {0} iterations")]
    QpMaxIter(usize),

    #[error("node terminated after {0} local iterations and cannot be updated")]
    Frozen(usize),

    #[error("communication graph is not strongly connected")]
    NotStronglyConnected,

    #[error("node {node} hit the iteration cap of {cap} without terminating")]
    IterationCap { node: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("initial state is outside the feasible region")]
    InitialStateInfeasible,
}
