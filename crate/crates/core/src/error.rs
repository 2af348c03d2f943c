use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate frame: row {row} has zero power")]
    DegenerateFrame { row: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("variable is not recorded on this tape")]
    NotOnTape,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter sets are not shape-compatible: {0}")]
    Incompatible(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible transfer plan: device {device} sends {requested} but holds {available}")]
    InfeasiblePlan {
        device: String,
        requested: f64,
        available: f64,
    },

    #[error("format error in {context}: {reason}")]
    Format { context: String, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed trace at line {line}: {reason}")]
    Trace { line: usize, reason: String },

    #[error("invalid configuration:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<ConfigIssue>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One configuration violation, addressed by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
