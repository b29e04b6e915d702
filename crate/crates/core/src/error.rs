use thiserror::Error;

/// Errors raised by the transport laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point {0:?} lies outside the closure of the domain")]
    OutsideDomain([f64; 3]),

    #[error("backward characteristic never leaves the domain")]
    UnboundedRay,

    #[error("point {0:?} is outside the interpolation hull of the grid")]
    OutOfHull([f64; 3]),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("velocity grid is not closed under the reflection map: {0}")]
    NotReflectionClosed(String),

    #[error("power iteration did not converge after {iterations} iterations (last relative change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },

    #[error("history underrun: dt = {dt} exceeds a quarter of the smallest sojourn time {min_tau}")]
    HistoryUnderrun { dt: f64, min_tau: f64 },

    #[error("resolvent not certified at lambda = {lambda}: observed iterate ratio {ratio}")]
    NotCertified { lambda: f64, ratio: f64 },

    #[error("degenerate growth window: {0}")]
    DegenerateWindow(String),

    #[error("negative kernel entry {0}")]
    NegativeKernel(f64),

    #[error("q-integral diverges; criterion inapplicable")]
    DivergentIntegral,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// The input was rejected before any numerics ran, as opposed to a
    /// computation that failed.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::Config(_)
                | Error::Unsupported(_)
                | Error::NotReflectionClosed(_)
                | Error::GridMismatch(_)
                | Error::NegativeKernel(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
