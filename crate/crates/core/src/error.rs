use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: unknown {kind} id \"{id}\"")]
    UnresolvedId {
        file: String,
        line: usize,
        kind: &'static str,
        id: String,
    },
    #[error("duplicate {kind} id \"{id}\"")]
    DuplicateId { kind: &'static str, id: String },
    #[error("unknown {kind} id \"{id}\"")]
    UnknownId { kind: &'static str, id: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fast policy \"{policy}\" needs response times; missing on judgments {records:?}")]
    MissingResponseTime { policy: String, records: Vec<usize> },
    #[error("requested {requested} triplets but only {available} are available")]
    UniverseExhausted { requested: u128, available: u128 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version mismatch: {0}")]
    CheckpointVersion(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("unsupported for this model mode: {0}")]
    Mode(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
