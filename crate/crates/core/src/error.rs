use std::io;

use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset} ({field}): {message}")]
    Format {
        offset: u64,
        field: &'static str,
        message: String,
    },

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<FedError>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FedError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;

impl FedError {
    pub(crate) fn in_client(self, round: usize, client: usize) -> Self {
        FedError::Client {
            round,
            client,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        FedError::Round {
            round,
            source: Box::new(self),
        }
    }
}
