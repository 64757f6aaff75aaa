use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error kinds shared across the crate. The variants mirror the failure
/// classes the CLI maps onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A mathematical function was evaluated outside its domain (poles, endpoints).
    #[error("domain error: {0}")]
    Domain(String),
    /// A family parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A computation produced a non-finite or degenerate value.
    #[error("numerical fault: {0}")]
    Numerical(String),
    /// A label, config or file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}

pub(crate) fn ensure_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!(
            "{what}: length mismatch ({a} vs {b})"
        )));
    }
    Ok(())
}
