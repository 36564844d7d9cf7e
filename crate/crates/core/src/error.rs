use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("ingestion error in {}: {msg}", path.display())]
    Ingestion { path: PathBuf, msg: String },

    #[error("bad annotation for image {image_id}: {msg}")]
    Annotation { image_id: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("degenerate box {0}")]
    DegenerateBox(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("training diverged: loss component {component} is not finite")]
    Divergence { component: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image too small: {height}x{width} for stride {stride}")]
    ImageTooSmall { height: usize, width: usize, stride: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
