use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's shape or range precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("capacity exceeded: need {needed} positions, model supports {max}")]
    Capacity { needed: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An invariant that upstream code is supposed to guarantee did not hold.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a bug.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Partition(_)
                | Error::Fusion(_)
                | Error::Capacity { .. }
                | Error::Json(_)
                | Error::Io(_)
        )
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
