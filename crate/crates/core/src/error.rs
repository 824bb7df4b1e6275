use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on the extent of a named axis.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Malformed input data. `location` is a line number, byte offset or
    /// character position depending on the format.
    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn parse(location: impl ToString, msg: impl Into<String>) -> Self {
        Error::Parse {
            location: location.to_string(),
            msg: msg.into(),
        }
    }

    /// Short category tag used by the command line front-end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "argument",
            Error::NonFinite { .. } => "numeric",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}
