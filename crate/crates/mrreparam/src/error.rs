use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI reports them: anything format- or
/// data-shaped maps to exit code 2, numeric failures (NaN loss) to exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("rejected input for {op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    #[error("degenerate variance in {op}: {detail}")]
    DegenerateVariance { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("corrupt file {path} at byte offset {offset}: {detail}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn input(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
