use std::io;

/// Errors produced anywhere in the modelling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unknown persona token {0:?}")]
    Persona(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
