use thiserror::Error;

/// Errors raised by tensor operations, layers, modules and the toy trainer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} elements but {got} values were given")]
    Construction {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("synthetic data generation failed: {0}")]
    Generation(String),
    #[error("non-finite loss {loss} at training step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
