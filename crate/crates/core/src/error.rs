use thiserror::Error;

/// Errors raised by the workbench.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("malformed trace: {0}")]
    MalformedTrace(String),

    #[error("no termination within {cap} steps")]
    NonTermination { cap: usize },

    #[error(
        "precision error: value {value} is {distance} from the nearest embedding (budget {budget})"
    )]
    Precision {
        value: f64,
        distance: f64,
        budget: f64,
    },

    #[error("locality violation: read of position {read} at step {at} with window {window}")]
    Locality {
        read: usize,
        at: usize,
        window: usize,
    },

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
