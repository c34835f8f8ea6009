use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad key, bad value, shape mismatch).
    #[error("configuration error: {0}")]
    Config(String),

    /// A preset's defining identity does not hold (e.g. batch × rollouts ≠ budget).
    #[error("preset constraint violated: {0}")]
    Constraint(String),

    /// Checkpoint could not be read, failed its checksum, or has the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
