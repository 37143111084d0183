use thiserror::Error;

/// Errors produced by the library.
///
/// `is_validation` separates bad caller input (shapes, ranges, malformed
/// files) from internal failures; the CLI maps the former to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite loss at step {step} (lr {lr:.3e}, logit scale {logit_scale:.4})")]
    NonFinite {
        step: usize,
        lr: f64,
        logit_scale: f64,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Invalid(_)
                | Error::UnknownToken(_)
                | Error::Degenerate(_)
                | Error::Format(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
