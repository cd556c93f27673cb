use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(&'static str),

    #[error("ratio undefined for an identically zero field")]
    ZeroField,

    #[error("empty support")]
    EmptySupport,

    #[error("unsupported kernel exponent alpha = {alpha} in dimension {d}")]
    UnsupportedExponent { d: usize, alpha: f64 },

    #[error("fixed point did not converge after {iterations} iterations (last L1 change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("run with epsilon = {epsilon} stopped at t = {t} before reaching t_fix = {t_fix}")]
    RunEndedEarly { epsilon: f64, t: f64, t_fix: f64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
