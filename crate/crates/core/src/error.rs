use thiserror::Error;

/// Errors raised anywhere in the fusion stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("wiring error: {0}")]
    Wiring(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
