//! Crate-wide error type.

use std::fmt;

/// Errors reported by the engine and its tools.
#[derive(Debug)]
pub enum Error {
    /// Tensor/layer shape mismatch; the message names the offending axes.
    Shape(String),
    /// Invalid configuration value or an operation called on a misconfigured object.
    Config(String),
    /// Input value outside the documented domain (e.g. Poisson input not in [0,1]).
    Domain(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    /// Internal invariant violation (missing retained state, corrupt counters).
    Internal(String),
    /// Malformed binary or text input; `offset` is the byte offset where parsing failed.
    Parse { offset: u64, message: String },
    /// I/O failure with the path or operation that caused it.
    Io { context: String, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Config(m) => write!(f, "invalid configuration: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Internal(m) => write!(f, "internal error: {m}"),
            Error::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            Error::Io { context, source } => write!(f, "i/o error ({context}): {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
