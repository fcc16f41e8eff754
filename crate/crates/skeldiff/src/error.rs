use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("pooling plan error: {0}")]
    PoolingPlan(String),

    #[error("counterpart pairing error: {0}")]
    Counterpart(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("motion file format error: {0}")]
    MotionFormat(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("schedule parameter error: {0}")]
    Schedule(String),

    #[error("text encoding error: {0}")]
    Text(String),

    #[error("edit spec error: {0}")]
    EditSpec(String),

    #[error("training diverged: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
