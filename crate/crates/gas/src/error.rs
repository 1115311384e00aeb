use thiserror::Error;

/// Errors raised by the network model and the solver.
#[derive(Debug, Error)]
pub enum GasError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("range error: t = {t} s outside [0, {horizon}] s")]
    Range { t: f64, horizon: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid network: {0:?}")]
    InvalidNetwork(Vec<String>),
    #[error("solver failure at time index {time_index}: {reason} (residual {residual:.3e})")]
    SolverFailure {
        time_index: usize,
        reason: String,
        residual: f64,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GasError>;
