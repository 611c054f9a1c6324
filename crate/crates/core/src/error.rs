use std::io;

use thiserror::Error;

pub type Result<T, E = BevError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BevError {
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(
        "insufficient history: window {window} needs at least {window} frames, got {available}"
    )]
    InsufficientHistory { window: usize, available: usize },

    #[error("insufficient frames: {frames} frames cannot fill a window of {window}")]
    InsufficientFrames { window: usize, frames: usize },

    #[error("stream order violated: timestamp {current} does not follow {previous}")]
    StreamOrder { previous: f64, current: f64 },

    #[error("empty stream")]
    EmptyStream,

    #[error("invalid interval {0} s: must be positive")]
    InvalidInterval(f64),

    #[error("invalid rate {0}: must lie in [0, 1)")]
    InvalidRate(f64),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
