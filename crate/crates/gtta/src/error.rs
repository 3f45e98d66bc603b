use thiserror::Error;

#[derive(Error, Debug)]
pub enum GttaError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("non-finite gradient; update rejected")]
    NonFiniteGradient,

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("style memory is empty")]
    EmptyMemory,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GttaError>;
