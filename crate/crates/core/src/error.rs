use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: unbiased variance needs at least 2 elements along the reduced axis, got {extent}")]
    DegenerateEstimator { op: &'static str, extent: usize },

    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("function value is not finite at parameter {param}[{index}]")]
    NonFiniteValue { param: String, index: usize },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("parameter name {0:?} already registered")]
    DuplicateParameter(String),

    #[error("weight row {row} has zero norm")]
    ZeroWeightRow { row: usize },

    #[error("hidden state became non-finite at step {step} (norm at explosion {norm})")]
    NonFiniteState { step: usize, norm: f64 },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("normalization scale {sigma} below threshold for unit {unit}; metric is singular")]
    SingularMetric { unit: usize, sigma: f64 },

    #[error("observation {y} outside the support of the {family} family")]
    OutsideSupport { family: &'static str, y: f64 },

    #[error("Bernoulli mean saturated at 0 or 1; KL divergence is infinite")]
    InfiniteKl,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invariance table mismatch: {0}")]
    TableMismatch(String),
}
