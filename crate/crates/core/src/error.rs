use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("row {row} of the interaction weights sums to {sum}, outside [0,1]")]
    RowSum { row: usize, sum: f64 },
    #[error("exact enumeration infeasible for {blocks} blocks (limit 24)")]
    ExactInfeasible { blocks: usize },
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: String,
        iterations: usize,
        residual: f64,
    },
    #[error("{what} diverged at iteration {iteration}")]
    Divergence { what: String, iteration: usize },
    #[error("unsupported: {0}")]
    Capability(String),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    #[error("step halving changed the result by {difference:e}; refine the grid")]
    Refinement { difference: f64 },
    #[error("internal inconsistency in {what}: {difference:e}")]
    Inconsistent { what: String, difference: f64 },
    #[error("horizon {horizon} too large: contraction factor {factor}")]
    HorizonTooLarge { horizon: f64, factor: f64 },
    #[error("range error: {0}")]
    Range(String),
    #[error("experiment failed: {0}")]
    Experiment(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
