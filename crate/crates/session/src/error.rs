use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Core(#[from] xtamer_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] xtamer_core::CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("session is not calibrated")]
    NotCalibrated,
    #[error("{0}")]
    Conflict(String),
    #[error("reward arrived after {waited_ms} ms (limit {limit_ms} ms); interaction discarded")]
    RewardTimeout { waited_ms: u128, limit_ms: u128 },
    #[error("checkpoint does not match this session: {0}")]
    ResumeMismatch(String),
}

pub type Result<T, E = SessionError> = std::result::Result<T, E>;
