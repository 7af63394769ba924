use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("codec error at byte offset {offset}: {message}")]
    Codec { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("class {class} has {available} rows, {required} required")]
    InsufficientData {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("non-finite function value at coordinate {coordinate} ({group})")]
    Evaluation { group: String, coordinate: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn codec(offset: u64, message: impl Into<String>) -> Self {
        Error::Codec {
            offset,
            message: message.into(),
        }
    }
}
