use thiserror::Error;

/// Errors raised by the solvers, diagnostics and the scenario runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("delay {delay} is not a multiple of the step {step} (ratio {ratio})")]
    Misaligned { delay: f64, step: f64, ratio: f64 },

    #[error("forward coefficients depend on (y, a, z, k) but no backward data was supplied")]
    MissingBackwardData,

    #[error("non-finite {quantity} at path {path}, step {step}")]
    NonFinite {
        quantity: &'static str,
        path: usize,
        step: usize,
    },

    #[error("regression at step {step} is degenerate: {reason}")]
    DegenerateRegression { step: usize, reason: String },

    #[error("inadmissible control: {0}")]
    Inadmissible(String),

    #[error("bisection bracket not found after {expansions} expansions (residuals {lo_residual:e}, {hi_residual:e})")]
    BracketNotFound {
        expansions: usize,
        lo_residual: f64,
        hi_residual: f64,
    },

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
