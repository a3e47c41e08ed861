use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("price {price} outside local volatility knots [{min}, {max}]")]
    OutOfKnotRange { price: f64, min: f64, max: f64 },

    #[error("invalid potential {value} for particle {particle} at step {step}")]
    InvalidPotential {
        particle: usize,
        step: usize,
        value: f64,
    },

    #[error("pilot run produced {found} qualifying paths, need at least {needed}; increase the pilot size")]
    PilotTooSmall { found: usize, needed: usize },

    #[error("trace mismatch: {0}")]
    TraceMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
