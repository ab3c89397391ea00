use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("time {t} outside [{lo}, {hi}]")]
    Range { t: f64, lo: f64, hi: f64 },
    #[error("non-finite energy gradient while decoding at y = {y:?}")]
    Decode { y: Vec<f64> },
    #[error("training error: {message} (sample index {sample:?})")]
    Training {
        message: String,
        sample: Option<usize>,
    },
    #[error("ODE solver failed at t = {t}: {message}")]
    Solver {
        t: f64,
        message: String,
        trajectory: Vec<(f64, Vec<f64>)>,
    },
    #[error("estimation error: {0}")]
    Estimation(String),
}

pub type Result<T> = core::result::Result<T, Error>;
