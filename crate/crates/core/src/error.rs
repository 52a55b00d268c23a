use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure categories used
/// throughout the pipeline; the CLI translates them into exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or extents.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A label value outside the declared class range.
    #[error("label error: {0}")]
    Label(String),

    /// An operation called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Internally inconsistent data (e.g. pooling indices out of range).
    #[error("corrupt data: {0}")]
    Corrupt(String),

    /// Malformed binary input; names the offending field and byte offset.
    #[error("parse error: field `{field}` at byte {offset}: {detail}")]
    Parse {
        field: &'static str,
        offset: usize,
        detail: String,
    },

    /// A generation spec that violates its own constraints.
    #[error("spec error: {0}")]
    Spec(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Bad configuration file or unknown key.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
