use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. The CLI maps each variant class to a process
/// exit code: usage/config errors -> 1, data errors -> 2, numeric -> 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Image/tensor geometry does not satisfy an operation's precondition.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Dataset or file-system problem.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint format, version or shape mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite values or a failed numerical verification.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Geometry(_) | Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
