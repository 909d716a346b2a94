use std::io;

use thiserror::Error;

use crate::geometry::GeometryError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unknown frame {0}")]
    UnknownFrame(String),

    #[error("predictor unavailable: {0}")]
    PredictorUnavailable(String),

    #[error("underconstrained pose solve: {0} matches, need at least 7")]
    Underconstrained(usize),

    #[error("degenerate geometry: normal matrix condition number {0:e}")]
    DegenerateGeometry(f64),

    #[error("factor graph is disconnected into components {0:?}")]
    Disconnected(Vec<Vec<String>>),

    #[error("agents {0:?} have no inter-agent loop linking them to the anchor")]
    UnfusedAgents(Vec<u32>),

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("agent {agent} failed: {reason}")]
    AgentFailure { agent: u32, reason: String },

    #[error("duplicate agent {0}")]
    DuplicateAgent(u32),

    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl Error {
    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
