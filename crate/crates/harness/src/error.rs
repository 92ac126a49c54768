use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] nvib_model::ModelError),
    #[error(transparent)]
    Core(#[from] nvib_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
