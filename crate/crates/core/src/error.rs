use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("illegal state: {0}")]
    IllegalState(String),
    #[error("numeric fault: {0}")]
    NumericFault(String),
    #[error("planning failure: {0}")]
    PlanningFailure(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed record: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn illegal(msg: impl Into<String>) -> Self {
        Error::IllegalState(msg.into())
    }

    /// True for faults that should abort a run rather than be logged and skipped.
    pub fn is_fatal(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Io(_))
    }
}
