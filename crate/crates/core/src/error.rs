use thiserror::Error;

use crate::density::GridAxis;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The dilation `P_{tau,p0}` is not invertible at `tau = 0`.
    #[error("dilation parameter tau = {tau} is not invertible (need tau > 0)")]
    DegenerateDilation { tau: f64 },

    #[error("{what}: argument {value} outside the domain ({domain})")]
    Domain {
        what: &'static str,
        value: String,
        domain: &'static str,
    },

    #[error("invalid grid specification: {0}")]
    InvalidGrid(String),

    /// A truncation or aliasing estimate exceeds the requested tolerance.
    #[error("resolution insufficient: {detail} (estimate {estimate:.3e} > tolerance {tolerance:.3e})")]
    Resolution {
        detail: String,
        estimate: f64,
        tolerance: f64,
    },

    #[error("query {value} outside grid axis {axis:?} range [{min}, {max}]")]
    OutOfBounds {
        axis: GridAxis,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} did not converge (residual {residual:.3e})")]
    NotConverged { what: &'static str, residual: f64 },

    #[error("malformed grid file: {0}")]
    Format(String),

    #[error("tolerance check failed: {0}")]
    Tolerance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}
