use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singular schedule: alpha({t}) = {alpha}")]
    SingularSchedule { t: f64, alpha: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("state space too large: {size} exceeds {limit}")]
    Capacity { size: u128, limit: u128 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("denoiser contract violated: {0}")]
    Contract(String),
    #[error("nothing to do: {0}")]
    NoOp(&'static str),
    #[error("selection error: asked for {k} of {available} candidates")]
    Selection { k: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
