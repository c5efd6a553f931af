use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular operator: {0}")]
    Singular(String),
    #[error("enumeration cap exceeded: {0}")]
    Cap(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
