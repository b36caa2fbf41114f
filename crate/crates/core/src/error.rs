use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),

    #[error("platform error: {0}")]
    Platform(String),

    /// A scheduler broke a bookkeeping rule (double assignment, unknown job,
    /// unknown chunk). The run is aborted.
    #[error("simulation integrity error: {0}")]
    Integrity(String),

    /// Agents disagreed, or a required measurement was never shared.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("cost profile error: {0}")]
    Profile(String),

    #[error("invalid packing instance: {0}")]
    InvalidInstance(String),

    #[error("instance too large for the exhaustive oracle: {items} items, {bins} bins")]
    OracleTooLarge { items: usize, bins: usize },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    /// `line` is 1-based; 0 marks input that did not come from a file line
    /// (flags, environment).
    #[error("{}{message}", line_prefix(.line))]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

fn line_prefix(line: &usize) -> String {
    if *line == 0 {
        String::new()
    } else {
        format!("line {line}: ")
    }
}

impl Error {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } => 2,
            Error::Integrity(_) | Error::Protocol(_) => 3,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
