use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate sample")]
    DegenerateSample,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("all observations censored; Kaplan-Meier estimate undefined")]
    AllCensored,

    #[error("empty tail: no residual mass at or beyond {at}")]
    EmptyTail { at: f64 },

    #[error("non-finite weights: max exponent {max_exponent:.3} overflows")]
    WeightOverflow { max_exponent: f64 },

    #[error("no interior point: column {0} of the balance constraints does not straddle zero")]
    NoInteriorPoint(String),

    #[error("weight solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("censoring target {target} unreachable; achieved rate {achieved}")]
    CensoringUnreachable { target: f64, achieved: f64 },

    #[error("bootstrap resample had no events after {attempts} redraws")]
    BootstrapNoEvents { attempts: usize },

    #[error("{file}:{line}: {message}")]
    DataFormat {
        file: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
