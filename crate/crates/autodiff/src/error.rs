use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("index {index} out of range for {op} with extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
