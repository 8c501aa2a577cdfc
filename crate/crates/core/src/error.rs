use std::path::PathBuf;

use gridbench_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("operating point is for case `{found}`, expected `{expected}`")]
    MismatchedCase { expected: String, found: String },
    #[error("{component} {position} references missing bus {bus}")]
    DanglingReference {
        component: &'static str,
        position: usize,
        bus: usize,
    },
    #[error("case failed validation: {0}")]
    InvalidCase(String),
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        got: usize,
    },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("unit error: {0}")]
    Unit(String),
    #[error("bad split ratios: {0}")]
    BadRatios(String),
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("violation norm over an empty sample set")]
    EmptySampleSet,
    #[error("missing bounds for {0}")]
    MissingBounds(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("non-finite loss in term `{term}` at samples_seen={samples_seen}")]
    NonFiniteLoss { term: String, samples_seen: u64 },
    #[error("data missing: {0}")]
    DataMissing(String),
    #[error("held-out case `{0}` appears in a training stream")]
    Leakage(String),
    #[error("incompatible schema: {0}")]
    IncompatibleSchema(String),
    #[error("reports have heterogeneous configs: {0}")]
    HeterogeneousConfigs(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("singular linear system")]
    SingularSystem,
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("non-positive input: {0}")]
    NonPositiveInput(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MismatchedCase { .. } => "MismatchedCase",
            Error::DanglingReference { .. } => "DanglingReference",
            Error::InvalidCase(_) => "InvalidCase",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Schema { .. } => "SchemaError",
            Error::Unit(_) => "UnitError",
            Error::BadRatios(_) => "BadRatios",
            Error::EmptySplit(_) => "EmptySplit",
            Error::EmptySampleSet => "EmptySampleSet",
            Error::MissingBounds(_) => "MissingBounds",
            Error::UnknownRelation(_) => "UnknownRelation",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::DataMissing(_) => "DataMissing",
            Error::Leakage(_) => "LeakageError",
            Error::IncompatibleSchema(_) => "IncompatibleSchema",
            Error::HeterogeneousConfigs(_) => "HeterogeneousConfigs",
            Error::Config(_) => "ConfigError",
            Error::SingularSystem => "SingularSystem",
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::NonPositiveInput(_) => "NonPositiveInput",
            Error::DegenerateFit(_) => "DegenerateFit",
            Error::DegenerateData(_) => "DegenerateData",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Autodiff(AutodiffError::Shape { .. }) => "ShapeError",
            Error::Autodiff(_) => "AutodiffError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    pub(crate) fn dim(field: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            field: field.into(),
            expected,
            got,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
