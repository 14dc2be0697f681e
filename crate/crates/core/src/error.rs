use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("angle {theta} rad is outside the monotone distortion domain (max {max} rad)")]
    NonMonotoneDomain { theta: f64, max: f64 },
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("image is {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("sample ({x}, {y}) is outside level {level}")]
    OutOfBounds { x: f64, y: f64, level: usize },
    #[error("asked for {requested} neighbors but only {available} other views exist")]
    NotEnoughViews { requested: usize, available: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no valid pixels: every warped sample fell outside the neighbor images")]
    NoValidPixels,
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error("regularizer window has {0} snapshots, need at least 2")]
    WindowTooShort(usize),
    #[error("iso level {iso} produced no surface (max density {max})")]
    EmptySurface { iso: f64, max: f64 },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),
    #[error("cameras.json has no record for {0}")]
    MissingCameraRecord(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("corrupt depth file {path}: {reason}")]
    CorruptDepthFile { path: PathBuf, reason: String },
    #[error("depth priors requested but {0} has no priors/ directory")]
    MissingPriors(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
