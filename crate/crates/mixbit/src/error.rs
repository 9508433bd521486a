use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor or matrix extents do not line up for the requested operation.
    ShapeMismatch { context: &'static str, detail: String },
    /// A numeric invariant was violated (NaN/Inf, off-grid value, non-finite loss).
    Numeric(String),
    /// Invalid argument or unmet precondition.
    InvalidArg(String),
    /// Configuration problem (bad flag, bad config file, unknown key).
    Config(String),
    /// Malformed external data (dataset files, checkpoint files, BD model files).
    Format(String),
    /// A sampling or search request that cannot be satisfied.
    Infeasible(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Self::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Self::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::Infeasible(msg) => write!(f, "infeasible: {msg}"),
            Self::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for config problems, 3 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::InvalidArg(_) => 2,
            _ => 3,
        }
    }
}
