use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, malformed config files, broken constraints.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid input handed to an operation (empty batch, missing class, out-of-range label).
    #[error("input error: {0}")]
    Input(String),
    /// A partitioner could not produce valid shards after resampling.
    #[error("partition error: {0}")]
    Partition(String),
    /// The round-synchronous exchange contract was violated.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The operation is undefined for the given model variant.
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    /// A client step failed mid-run; carries the round for context.
    #[error("engine error at round {round}: {source}")]
    Engine {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code for the CLI: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
