use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum GsnError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("log: non-positive input {value} at flat index {index}")]
    LogDomain { value: f64, index: usize },

    #[error("chain is not ergodic: {witness}")]
    NotErgodic { witness: String },

    #[error("support violation: {msg}")]
    SupportViolation { msg: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("corrupt checkpoint (record `{record}`): {msg}")]
    CorruptCheckpoint { record: String, msg: String },

    #[error("bad config key `{key}`: {msg}")]
    Config { key: String, msg: String },
}

pub type Result<T> = std::result::Result<T, GsnError>;

impl GsnError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        GsnError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GsnError::Io {
            path: path.into(),
            source,
        }
    }
}
