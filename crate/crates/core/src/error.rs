use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("filter error: {0}")]
    Filter(String),

    #[error("stale measurement dropped: generated at step {gen_time}, oldest buffered step is {oldest}")]
    StaleMeasurement { gen_time: usize, oldest: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
