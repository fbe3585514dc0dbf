use thiserror::Error;

pub type Result<T> = std::result::Result<T, SacError>;

#[derive(Debug, Error)]
pub enum SacError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("temperature {0} K outside the supported 200-450 K range")]
    TemperatureOutOfRange(f64),

    #[error("no bracket found for {what} after {expansions} expansions")]
    BracketNotFound { what: &'static str, expansions: usize },

    #[error("{what} did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("range violation in {term}: argument {value} leaves the solver window")]
    RangeViolation { term: String, value: f64 },

    #[error("DAC offset fit failed: max deviation {max_deviation:.4} exceeds {limit}")]
    FitFailed { max_deviation: f64, limit: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("training diverged at epoch {epoch} (loss {loss:e})")]
    Divergence {
        epoch: usize,
        loss: f64,
        history: Vec<f64>,
    },

    #[error("curves do not overlap: {0}")]
    NoOverlap(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("weight file error: {0}")]
    WeightFile(String),

    #[error("{failed} of {total} solver points failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> SacError {
    SacError::InvalidArgument(msg.into())
}
