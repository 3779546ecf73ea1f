//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid value in {context}: {message}")]
    InvalidValue { context: String, message: String },

    #[error("input {h}x{w} is not divisible by {divisor}; pad to {padded_h}x{padded_w} (e.g. replicate-pad {pad_h} rows and {pad_w} columns)")]
    IndivisibleInput {
        h: usize,
        w: usize,
        divisor: usize,
        padded_h: usize,
        padded_w: usize,
        pad_h: usize,
        pad_w: usize,
    },

    #[error("sample {id}: image {h}x{w} is smaller than crop size {crop}")]
    CropTooLarge {
        id: String,
        h: usize,
        w: usize,
        crop: usize,
    },

    #[error("parameter sets differ at {name}: {detail}")]
    StructuralMismatch { name: String, detail: String },

    #[error("non-finite loss at iteration {iteration}; breakdown: {breakdown}")]
    NonFiniteLoss { iteration: usize, breakdown: String },

    #[error("empty dataset: {context}")]
    EmptyDataset { context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn image(path: &std::path::Path, source: image::ImageError) -> Self {
        Error::Image {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn invalid(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidValue {
            context: context.into(),
            message: message.into(),
        }
    }
}
