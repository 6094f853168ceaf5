//! Crate-wide error type. Every fallible public operation returns [`Result`].

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes disagree with what an operation requires. The message
    /// names the operation and the offending axis.
    #[error("dimension error in {op}: {message}")]
    Dimension { op: String, message: String },

    /// An index (element, timestep, node) is out of range.
    #[error("index error in {op}: {message}")]
    Index { op: String, message: String },

    /// An API contract was violated (wrong call order, wrong graph, frozen
    /// parameter misuse, invalid argument combination).
    #[error("contract violation in {op}: {message}")]
    Contract { op: String, message: String },

    /// A variable handle refers to a node the graph does not own.
    #[error("missing node in {op}: variable belongs to a different or dropped graph")]
    MissingNode { op: String },

    /// A numeric quantity became NaN or infinite where finiteness is required.
    #[error("non-finite value in {op}: {message}")]
    NonFinite { op: String, message: String },

    /// Configuration file problems: unknown keys, bad values, failed invariants.
    #[error("config error: {0}")]
    Config(String),

    /// A stored tensor, checkpoint, or manifest cannot be decoded.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// A dataset failed validation; names the scene that is at fault.
    #[error("corrupt dataset, scene {scene}: {message}")]
    CorruptDataset { scene: String, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &str, message: impl Into<String>) -> Self {
        Error::Dimension { op: op.into(), message: message.into() }
    }

    pub fn index(op: &str, message: impl Into<String>) -> Self {
        Error::Index { op: op.into(), message: message.into() }
    }

    pub fn contract(op: &str, message: impl Into<String>) -> Self {
        Error::Contract { op: op.into(), message: message.into() }
    }

    pub fn non_finite(op: &str, message: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into(), message: message.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
