use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("point ({x}, {y}, {z}) lies outside the scene bounds")]
    OutOfBounds { x: f64, y: f64, z: f64 },

    #[error("pixel ({u}, {v}) outside a {width}x{height} image")]
    PixelOutOfRange { u: u32, v: u32, width: u32, height: u32 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid sampling range: near {near} must be below far {far}")]
    InvalidRange { near: f64, far: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in block `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("training cancelled at iteration {iteration}")]
    Cancelled { iteration: usize },

    #[error("context protocol: {0}")]
    Context(String),

    #[error("stale provenance: mosaic was exported from `{found}`, live session is `{expected}`")]
    StaleProvenance { expected: String, found: String },

    #[error("corrupt {format} data: {reason}")]
    Corrupt { format: &'static str, reason: String },

    #[error("{kind} token is {size} bytes, limit is {limit}")]
    TokenTooLarge { kind: &'static str, size: usize, limit: usize },

    #[error("manifest {field}: {reason}")]
    Manifest { field: String, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn corrupt(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn manifest(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
