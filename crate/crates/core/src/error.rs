use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index ({row}, {col}) out of range for dimension {n}")]
    IndexOutOfRange { row: usize, col: usize, n: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state became non-finite at node {node}")]
    BlowUp { node: usize },

    #[error("path {path_id} aborted: state became non-finite at node {node}")]
    PathBlowUp { path_id: u64, node: usize },

    #[error("rate `{0}` is not declared")]
    UndeclaredRate(&'static str),

    #[error("non-finite derivative of field `{field}`")]
    NonFiniteDerivative { field: String },

    #[error("analytic {what} of field `{field}` disagrees with finite differences (relative discrepancy {discrepancy:e})")]
    DerivativeMismatch {
        field: String,
        what: &'static str,
        discrepancy: f64,
    },

    #[error("unknown field `{0}`")]
    UnknownField(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid rate matrix: {0}")]
    InvalidRate(String),

    #[error("invalid rate series: {0}")]
    InvalidSeries(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
