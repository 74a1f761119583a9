use thiserror::Error;

/// Errors surfaced by the planning, control and simulation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate state: {0}")]
    Degenerate(String),
    #[error("flatness singularity: {0}")]
    FlatnessSingularity(String),
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("infeasible request: {0}")]
    Infeasible(String),
    #[error("no path found after expanding {explored} nodes")]
    NoPath { explored: usize },
    #[error("cable went slack at t = {time:.4} s (tension {tension:.5} N)")]
    TautViolation { time: f64, tension: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
