use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum LassieError {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("bundle format error: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LassieError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, LassieError>;

impl LassieError {
    pub fn non_finite(context: impl Into<String>) -> Self {
        LassieError::NonFinite {
            context: context.into(),
        }
    }

    /// Wraps an error with the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        LassieError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
