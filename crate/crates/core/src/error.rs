use thiserror::Error;

use crate::memsim::SimError;
use crate::pebble::PebbleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("score entry {value} at ({row}, {col}) is outside the overflow guard [-{guard}, {guard}]")]
    NumericOverflow {
        row: usize,
        col: usize,
        value: f64,
        guard: f64,
    },

    #[error("cache of {capacity} elements is too small: {reason}")]
    CacheTooSmall { capacity: usize, reason: String },

    #[error(transparent)]
    Sim(#[from] SimError),

    #[error(transparent)]
    Pebble(#[from] PebbleError),

    #[error("need at least {needed} data points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),
}
