use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A prompt pushed some class text feature to (near) zero norm or to a
    /// non-finite value. The prompt is unusable.
    #[error("degenerate text feature for class {class} (norm {norm:e})")]
    DegenerateTextFeature { class: usize, norm: f64 },

    #[error("augmented view degenerated after {attempts} resampling attempts")]
    DegenerateView { attempts: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown stream preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
