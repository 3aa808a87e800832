use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input outside the domain of an operation (empty box, singular matrix, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Parameters that cannot produce a meaningful run.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported dimension {n} (max {max})")]
    UnsupportedDimension { n: usize, max: usize },
    /// A certified inequality failed to hold. Never clamped.
    #[error("bound violated in {check}: observed {observed:e} > bound {bound:e}")]
    BoundViolation {
        check: String,
        observed: f64,
        bound: f64,
    },
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("decoder conflict: {0}")]
    Conflict(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl fmt::Display) -> Self {
        Error::Domain(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn precondition(msg: impl fmt::Display) -> Self {
        Error::Precondition(msg.to_string())
    }

    pub fn budget(msg: impl fmt::Display) -> Self {
        Error::Budget(msg.to_string())
    }

    pub fn bound(check: impl fmt::Display, observed: f64, bound: f64) -> Self {
        Error::BoundViolation {
            check: check.to_string(),
            observed,
            bound,
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) | Error::Parse { .. } => 3,
            Error::BoundViolation { .. } => 4,
            _ => 1,
        }
    }
}
