use std::path::PathBuf;

/// Errors produced by sidforge operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("code {code} out of range for position {position} (bound {bound})")]
    CodeOutOfRange {
        position: usize,
        code: u32,
        bound: u32,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("preference pair ordering violated: positive reward {pos} < negative reward {neg}")]
    PairOrdering { pos: f64, neg: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad codebook file: {0}")]
    Format(String),

    #[error("missing {what} for {id}")]
    Missing { what: &'static str, id: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
