use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: missing column `{column}`")]
    Schema { column: String },

    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },

    #[error("empty recording: {frames} valid frame(s), need at least 2")]
    EmptyRecording { frames: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("trim error: recording lasts {duration_s:.3} s, cannot remove {head_s} s + {tail_s} s")]
    Trim { duration_s: f64, head_s: f64, tail_s: f64 },

    #[error("degenerate rotation (zero quaternion){}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    DegenerateRotation { frame: Option<usize> },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("sequence too short: {available} frame(s) available, {needed} needed")]
    TooShort { needed: usize, available: usize },

    #[error("split error for user `{user}`: {message}")]
    Split { user: String, message: String },

    #[error("enrollment error: requested {requested_min} min, only {available_min:.3} min available")]
    Enrollment { requested_min: f64, available_min: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label error: label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Training { epoch: usize, step: usize, message: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the command line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::Format { .. } => "format",
            Error::EmptyRecording { .. } => "empty-recording",
            Error::Parameter(_) => "parameter",
            Error::Trim { .. } => "trim",
            Error::DegenerateRotation { .. } => "degenerate-rotation",
            Error::UnsupportedEncoding(_) => "unsupported-encoding",
            Error::TooShort { .. } => "too-short",
            Error::Split { .. } => "split",
            Error::Enrollment { .. } => "enrollment",
            Error::Shape(_) => "shape",
            Error::Label { .. } => "label",
            Error::State(_) => "state",
            Error::Training { .. } => "training",
            Error::CheckpointFormat(_) => "checkpoint-format",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::Config(_) => "config",
            Error::Verification(_) => "verification",
            Error::Usage(_) => "usage",
            Error::Csv { .. } => "csv",
            Error::Io(_) => "io",
        }
    }
}
