//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's input contract (shape, range, alignment).
    #[error("input contract violated: {0}")]
    InputContract(String),

    /// A configuration value is out of its documented domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or parameter became non-finite during optimization.
    #[error("numeric divergence in {term} (epoch {epoch}, step {step}): {detail}")]
    Divergence {
        term: &'static str,
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// A wire frame or session transcript violated the protocol.
    #[error("protocol error in {field}: {detail}")]
    Protocol {
        field: &'static str,
        detail: String,
    },

    /// A synthetic world failed one of its density contracts.
    #[error("world contract violated: {0}")]
    WorldContract(String),

    /// A checkpoint file is malformed or of an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::InputContract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn protocol(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Protocol {
            field,
            detail: detail.into(),
        }
    }

    pub fn world(msg: impl Into<String>) -> Self {
        Error::WorldContract(msg.into())
    }
}
