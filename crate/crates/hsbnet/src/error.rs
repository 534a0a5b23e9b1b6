use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed an argument of the wrong shape or out of range.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A configuration violates a structural invariant (divisibility, ordering).
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An iterative numerical kernel failed.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// An internal invariant was violated; indicates a bug, not bad input.
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    /// An operation was called in the wrong state (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),
    /// Malformed container or manifest bytes.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

pub(crate) fn check_shape(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return arg(format!(
            "{what}: expected shape {}x{}, got {}x{}",
            want.0, want.1, got.0, got.1
        ));
    }
    Ok(())
}
