use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-integral output size for input {input} (kernel {kernel}, stride {stride}, padding {padding})")]
    NonIntegralOutput {
        op: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("label {label} at position {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("variables belong to different graphs")]
    ForeignGraph,
    #[error("grad requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
