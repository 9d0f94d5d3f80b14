use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel {index} at (row {row}, col {col}) is outside the {height}x{width} image")]
    PixelOutOfBounds {
        index: usize,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("RPC localization did not converge after {iterations} iterations (residual {residual:.3e})")]
    RpcNonConvergence { iterations: usize, residual: f64 },

    #[error("altitude {altitude} is outside the RPC normalization range")]
    AltitudeOutOfRange { altitude: f64 },

    #[error("degenerate ray: {0}")]
    DegenerateRay(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid scene bounds: {0}")]
    InvalidBounds(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("negative density {value} at sample {index}")]
    NegativeDensity { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("depth point references unknown ray {0}")]
    UnmatchedRay(usize),

    #[error("image too small for SSIM: {width}x{height}, need at least {window}x{window}")]
    ImageTooSmall { width: usize, height: usize, window: usize },

    #[error("no jointly valid cells between the two DSMs")]
    NoValidCells,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfigValue { key: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (NaN, divergence, solver failure)
    /// rather than by malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Diverged { .. }
                | Error::RpcNonConvergence { .. }
                | Error::NegativeDensity { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
