use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("metric error: {0}")]
    Metric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}
pub(crate) use dim_err;
