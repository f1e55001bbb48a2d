use thiserror::Error;

/// Errors raised across the training stack, grouped by family so the CLI
/// can map each family to its own exit-code range.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad key, bad value, or inconsistent dimensions.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called with arguments that violate its preconditions.
    #[error("usage error: {0}")]
    Usage(String),
    /// A wire message or protocol exchange was malformed or inconsistent.
    #[error("protocol error at byte {offset}: {reason}")]
    Protocol { offset: usize, reason: String },
    /// Dataset files could not be parsed.
    #[error("ingestion error in {source_name} at byte {offset}: {reason}")]
    Ingestion {
        source_name: String,
        offset: usize,
        reason: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn protocol(offset: usize, reason: impl Into<String>) -> Self {
        Error::Protocol {
            offset,
            reason: reason.into(),
        }
    }

    pub fn ingestion(
        source_name: impl Into<String>,
        offset: usize,
        reason: impl Into<String>,
    ) -> Self {
        Error::Ingestion {
            source_name: source_name.into(),
            offset,
            reason: reason.into(),
        }
    }

    /// Process exit code for this error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 10,
            Error::Usage(_) => 11,
            Error::Ingestion { .. } => 20,
            Error::Io(_) => 21,
            Error::Protocol { .. } => 30,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
