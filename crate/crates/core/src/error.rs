use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("invalid adjacency: {0}")]
    InvalidAdjacency(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("series for node `{node}` has zero variance")]
    DegenerateSeries { node: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("timestamps not strictly increasing at data row {row}")]
    Ordering { row: usize },

    #[error("negative value {value} in column `{column}` at data row {row}")]
    Domain {
        row: usize,
        column: String,
        value: f64,
    },

    #[error("insufficient data: need at least {required} timesteps, have {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("r2 undefined: truth has zero variance")]
    R2Undefined,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Numeric failures map to a distinct process exit code from input errors.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Diverged(_))
    }
}
