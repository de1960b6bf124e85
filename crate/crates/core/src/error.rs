use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the set it must belong to (age outside the grid,
    /// non-positive hyperparameter, input beyond the HSGP boundary, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration (bad bracket partition, unknown enum value, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// The log posterior evaluated to a non-finite value.
    #[error("non-finite log density in {term}: {value}")]
    NonFinite { term: String, value: f64 },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("sampler failed: {0}")]
    Sampler(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Short machine-readable tag used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::NonFinite { .. } => "non_finite",
            Error::Optimizer(_) => "optimizer",
            Error::Sampler(_) => "sampler",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}
