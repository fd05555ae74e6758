use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("box side N_{axis} = {value} must be an even positive integer (N_mu/2 must be a natural number for the periodic box)")]
    OddBoxSide { axis: usize, value: usize },

    #[error("operation requires a periodic box")]
    RequiresPeriodic,

    #[error("operation requires a finite inverse temperature")]
    InfiniteBeta,

    #[error("low-temperature rods need an integer rescaled inverse temperature, got {0}")]
    NonIntegerBeta(f64),

    #[error("{what} = {value} exceeds the supported maximum {max}")]
    TooLarge { what: &'static str, value: usize, max: usize },

    #[error("negative spectral weight {value:e} in grid kernel (mode {mode})")]
    NegativeSpectralWeight { mode: usize, value: f64 },

    #[error("observable parse error: {0}")]
    Observable(String),

    #[error("config parse error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("tempered boundary condition violates the weighted summability bound: {0}")]
    NotTempered(String),

    #[error("fit refused: {0}")]
    FitRefused(String),

    #[error("oracle did not converge: {0}")]
    OracleNotConverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
