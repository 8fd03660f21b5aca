use std::path::PathBuf;

/// Errors produced across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mutual information is infinite: {0}")]
    InfiniteMi(String),

    #[error("batch too small: need at least {min} samples, got {got}")]
    BatchSize { min: usize, got: usize },

    #[error("sample size too small: need at least {min}, got {got}")]
    SampleSize { min: usize, got: usize },

    #[error("training diverged at step {step}: {diagnostics}")]
    Training { step: usize, diagnostics: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("benchmark error: {0}")]
    Benchmark(String),

    #[error("checkpoint {path}: format version {found} is not supported (expected {expected})")]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("plot rendering: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Shape(_) => "shape",
            Error::InfiniteMi(_) => "infinite-mi",
            Error::BatchSize { .. } => "batch-size",
            Error::SampleSize { .. } => "sample-size",
            Error::Training { .. } => "training",
            Error::Usage(_) => "usage",
            Error::Schema(_) => "schema",
            Error::Config { .. } => "config",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Placement(_) => "placement",
            Error::Benchmark(_) => "benchmark",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Plot(_) => "plot",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
