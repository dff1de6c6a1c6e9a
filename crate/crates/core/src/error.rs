use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is singular (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("degenerate operator: {0}")]
    DegenerateOperator(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("instance too large for enumeration: {0}")]
    Capacity(String),

    #[error("expected at least {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("series diverges: gamma * rho = {product:.6} (gamma = {gamma}, rho = {rho:.6})")]
    DivergentSeries { gamma: f64, rho: f64, product: f64 },

    #[error("invalid chain: row {row} has sum {row_sum:.6}, gamma * row_sum = {scaled:.6} exceeds 1")]
    InvalidChain { row: usize, row_sum: f64, scaled: f64 },

    #[error("walk {walk} exceeded the step cap of {cap}")]
    WalkCap { walk: u64, cap: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("objective evaluation failed: {0}")]
    Evaluation(String),

    #[error("tensor format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
