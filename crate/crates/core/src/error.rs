use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("energy model calibration failed: {0}")]
    Calibration(String),

    #[error("graph construction failed: {0}")]
    Graph(String),

    #[error("scenario parse error: {0}")]
    ScenarioParse(String),

    #[error("scenario validation failed: {0}")]
    ScenarioInvalid(String),

    #[error("run failed: {0}")]
    RunFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
