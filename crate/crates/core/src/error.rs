use thiserror::Error;

pub type Result<T> = std::result::Result<T, GrodError>;

#[derive(Debug, Error)]
pub enum GrodError {
    #[error("matrix is not positive definite after regularization (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("within-class scatter is degenerate")]
    DegenerateScatter,
    #[error("empty input")]
    EmptyInput,
    #[error("grod state used before initialization")]
    UninitializedState,
    #[error("every fake OOD candidate was filtered")]
    AllFiltered,
    #[error("calibration residuals are all zero; reduce the principal dimension")]
    DegenerateFeatures,
    #[error("metric needs a nonempty {0} score set")]
    EmptyClass(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("batch {batch}: {source}")]
    AtBatch {
        batch: usize,
        #[source]
        source: Box<GrodError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GrodError {
    /// Stable identifier for machine-readable error output.
    pub fn code(&self) -> &'static str {
        match self {
            GrodError::NotPositiveDefinite { .. } => "not_positive_definite",
            GrodError::DimensionMismatch { .. } => "dimension_mismatch",
            GrodError::ShapeMismatch(_) => "shape_mismatch",
            GrodError::TooFewSamples { .. } => "too_few_samples",
            GrodError::DegenerateScatter => "degenerate_scatter",
            GrodError::EmptyInput => "empty_input",
            GrodError::UninitializedState => "uninitialized_state",
            GrodError::AllFiltered => "all_filtered",
            GrodError::DegenerateFeatures => "degenerate_features",
            GrodError::EmptyClass(_) => "empty_class",
            GrodError::LengthMismatch { .. } => "length_mismatch",
            GrodError::InvalidArgument(_) => "invalid_argument",
            GrodError::Format { .. } => "format",
            GrodError::Config { .. } => "config",
            GrodError::File { .. } | GrodError::Io(_) => "io",
            GrodError::Checkpoint(_) => "checkpoint",
            GrodError::AtBatch { source, .. } => source.code(),
            GrodError::Json(_) => "json",
        }
    }

    /// Process exit status for this error: 3 I/O, 4 malformed input,
    /// 5 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            GrodError::File { .. } | GrodError::Io(_) => 3,
            GrodError::Format { .. }
            | GrodError::Config { .. }
            | GrodError::Checkpoint(_)
            | GrodError::Json(_)
            | GrodError::InvalidArgument(_) => 4,
            GrodError::NotPositiveDefinite { .. }
            | GrodError::DegenerateScatter
            | GrodError::DegenerateFeatures => 5,
            GrodError::AtBatch { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    /// Line number for errors tied to a position in an input file.
    pub fn line(&self) -> Option<usize> {
        match self {
            GrodError::Format { line, .. } | GrodError::Config { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Attach a path to an I/O error.
pub fn file_error(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> GrodError + '_ {
    move |source| GrodError::File { path: path.display().to_string(), source }
}
