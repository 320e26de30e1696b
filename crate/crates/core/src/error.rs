use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("column `{0}` is constant and cannot be normalized")]
    DegenerateColumn(String),

    #[error("intercept column already present")]
    AlreadyAugmented,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },

    #[error("matrix is singular or not positive definite: {0}")]
    SingularMatrix(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no tree has a valid leaf fit at this point")]
    NoValidLeaf,

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("dataset fingerprint {found} does not match model fingerprint {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("monte carlo aborted: {failed} of {reps} replications failed")]
    Abort { failed: usize, reps: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable identifier used in CLI error payloads.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Schema(_) => "SchemaError",
            Error::Parse { .. } => "ParseError",
            Error::Domain(_) => "DomainError",
            Error::DegenerateColumn(_) => "DegenerateColumnError",
            Error::AlreadyAugmented => "AlreadyAugmentedError",
            Error::Dim { .. } => "DimError",
            Error::SingularMatrix(_) => "SingularMatrixError",
            Error::Config(_) => "ConfigError",
            Error::NoValidLeaf => "NoValidLeafError",
            Error::Numerical(_) => "NumericalError",
            Error::DegenerateFit(_) => "DegenerateFitError",
            Error::Fingerprint { .. } => "FingerprintError",
            Error::Abort { .. } => "AbortError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }
}
