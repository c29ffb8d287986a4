use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing parameter `{0}` in weight archive")]
    MissingWeight(String),

    #[error("parameter `{path}` has shape {found:?} in archive, expected {expected:?}")]
    WeightShape {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite loss {loss} at batch {batch} (lr {lr:e})")]
    NonFiniteLoss { batch: usize, loss: f64, lr: f64 },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Invalid(_)
                | Self::Config(_)
                | Self::Shape(_)
                | Self::MissingWeight(_)
                | Self::WeightShape { .. }
                | Self::Toml(_)
        )
    }
}
