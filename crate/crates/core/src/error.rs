use thiserror::Error;

/// Errors raised by estimation, simulation and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    Validation(String),

    #[error("tied event times at t = {time} (subjects {first} and {second}); event times must be distinct, enable tie jittering to break them")]
    TiedEventTimes {
        time: f64,
        first: usize,
        second: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("subject {subject} has zero likelihood under every stratum")]
    ZeroDensity { subject: usize },

    #[error("empty weighted risk set at t = {time} in stratum {stratum}")]
    ZeroDenominator { time: f64, stratum: usize },

    #[error("singular block `{block}` in the information matrix")]
    Singular { block: String },

    #[error("information matrix of order {order} exceeds the cap of {cap}")]
    TooLarge { order: usize, cap: usize },

    #[error("simulated sample rejected: {0}")]
    Rejected(String),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{0} of {1} Monte Carlo replications failed")]
    TooManyFailures(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
