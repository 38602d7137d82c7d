use std::path::PathBuf;

use mustan_autograd::ShapeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed dataset layout for video {video}: {reason}")]
    Layout { video: String, reason: String },

    #[error("frames and masks are not aligned in video {video}: {frames} frames, {masks} masks")]
    Alignment {
        video: String,
        frames: usize,
        masks: usize,
    },

    #[error("invalid ground-truth label value {value} at pixel ({x}, {y})")]
    Label { value: u8, x: u32, y: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("cannot build a report from zero frames")]
    EmptyReport,

    #[error("output directory {0} exists and is not empty")]
    OutputExists(PathBuf),

    #[error(
        "non-finite loss at epoch {epoch}, step {step} (lr {lr:e}); batch clips: {}",
        clips.join(", ")
    )]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        lr: f64,
        clips: Vec<String>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
