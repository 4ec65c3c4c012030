use std::path::PathBuf;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Core(#[from] ksam_core::Error),

    #[error("{0}")]
    Invalid(String),

    #[error("heart training needs a heart mask for every sample; missing for: {}", .0.join(", "))]
    MissingHeartMasks(Vec<String>),

    #[error("pretrained encoder weights: {0}")]
    Pretrained(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<ModelError> for ksam_core::Error {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Core(e) => e,
            other => ksam_core::Error::Model(other.to_string()),
        }
    }
}
