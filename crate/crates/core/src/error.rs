use std::path::PathBuf;

/// Errors raised anywhere in the detector pipeline.
#[derive(Debug, thiserror::Error)]
pub enum HvprError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {op}")]
    NumericFailure { op: String },

    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },

    #[error("malformed record at byte offset {offset}: {detail}")]
    MalformedRecord { offset: usize, detail: String },

    #[error("non-finite value in record {index}")]
    NonFiniteRecord { index: usize },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("calibration is singular or not a rigid transform: {0}")]
    Calibration(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("duplicate pillar coordinate ({row}, {col})")]
    DuplicateCoords { row: usize, col: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HvprError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HvprError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HvprError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HvprError::NumericFailure { .. } | HvprError::MissingGradient { .. } => 3,
            HvprError::InvalidArgument(_) | HvprError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = HvprError> = std::result::Result<T, E>;
