use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the exit-code category
/// the CLI maps them to: usage (2), data (3), numeric (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: left is {lhs}, right is {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("{op}: expected a scalar (1x1) tensor, got {shape}")]
    NonScalar { op: &'static str, shape: String },

    #[error("{what}: sequence must be non-empty")]
    EmptySequence { what: &'static str },

    #[error("unknown slot `{0}`")]
    UnknownSlot(String),

    #[error("unknown value `{value}` for slot `{slot}`")]
    UnknownValue { slot: String, value: String },

    #[error("data error: {msg}")]
    Data { msg: String },

    #[error("data error in record {record}: {msg}")]
    Record { record: usize, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data { msg: msg.into() }
    }

    /// CLI exit-code category: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. }
            | Error::Record { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::UnknownSlot(_)
            | Error::UnknownValue { .. }
            | Error::EmptySequence { .. } => 3,
            Error::ShapeMismatch { .. } | Error::NonScalar { .. } | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
