use thiserror::Error;

/// Errors surfaced by the anticipation pipeline and its tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("detector backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("fuse called with an empty object set; use fuse_empty")]
    EmptyObjectSet,

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("schema validation failed for video '{video}': {message}")]
    SchemaValidation { video: String, message: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("recall undefined: dataset contains no positive videos")]
    UndefinedRecall,

    #[error("dataset generation failed: {0}")]
    GenerationError(String),

    #[error("benchmark aborted after {completed} timed frames: {message}")]
    BenchmarkAborted {
        completed: usize,
        /// Per-frame timings collected before the failure.
        partial_ms: Vec<f64>,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable kind tag, used in error records emitted by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidShape(_) => "invalid-shape",
            Error::BackendUnavailable(_) => "backend-unavailable",
            Error::DegenerateBox(_) => "degenerate-box",
            Error::EmptyObjectSet => "empty-object-set",
            Error::InvalidAnnotation(_) => "invalid-annotation",
            Error::SchemaValidation { .. } => "schema-validation",
            Error::MissingData(_) => "missing-data",
            Error::UndefinedRecall => "undefined-recall",
            Error::GenerationError(_) => "generation-error",
            Error::BenchmarkAborted { .. } => "benchmark-aborted",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
