use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("input too short: {len} samples, frame needs {frame}")]
    InputTooShort { len: usize, frame: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty tag: {0}")]
    EmptyTag(String),
    #[error("unembeddable caption: {0:?}")]
    UnembeddableCaption(String),
    #[error("empty index")]
    EmptyIndex,
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("embedding for {id} is not unit norm (norm {norm})")]
    NotUnitNorm { id: String, norm: f64 },
    #[error("leakage: candidate {0} is in the train split")]
    Leakage(String),
    #[error("insufficient samples for FAD: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("training divergence: {0}")]
    TrainingDivergence(String),
    #[error("sampler divergence at t={t}")]
    SamplerDivergence { t: f64 },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
