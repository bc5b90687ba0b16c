//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong when assembling or running a model.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor extents are incompatible with the requested operation.
    #[error("shape error in {op}: {message}")]
    Shape { op: String, message: String },

    /// A configuration value is missing, malformed, or out of range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A block or brain was set up twice.
    #[error("{0} has already been set up")]
    AlreadySetup(String),

    /// An operation that requires setup was called before setup.
    #[error("{0} has not been set up yet")]
    NotSetup(String),

    /// A name lookup failed.
    #[error("unknown name: {0}")]
    UnknownName(String),

    /// Two entities were registered under the same name.
    #[error("duplicate name: {0}")]
    DuplicateName(String),

    /// A block references an output that no attached block produces.
    #[error("dangling reference: {0}")]
    DanglingReference(String),

    /// The optimizer was handed a gradient map that does not match its
    /// parameter map.
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    /// A hyperparameter template could not be rendered.
    #[error("template error: {0}")]
    Template(String),

    /// A dataset file is absent and downloading is disabled.
    #[error("dataset missing: {0}")]
    DatasetMissing(String),

    /// A file failed validation (bad magic, wrong length, checksum mismatch).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A checkpoint could not be written or read back.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A remote fetch failed.
    #[error("download error: {0}")]
    Download(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Convenience constructor for [`Error::Shape`].
    pub fn shape(op: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            message: message.into(),
        }
    }
}
