//! Error types shared by the tensor engine and everything above it.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, TensorError>;

/// Errors emitted by tensor construction, tape operations and training.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Buffer length does not match the product of the declared shape.
    DataLength { expected: usize, got: usize },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operand does not have the rank the operation requires.
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    /// Convolution geometry cannot produce a positive output extent.
    ConvGeometry {
        op: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// A forward op produced (or was handed) a non-finite value.
    NonFinite { op: &'static str },
    /// Batch statistics are degenerate: one sample per channel in training mode.
    DegenerateStats { count: usize },
    /// Classification target outside [0, 1].
    InvalidTarget { min: f64, max: f64 },
    /// Input value outside the range the operation is defined on.
    OutOfRange {
        op: &'static str,
        min: f64,
        max: f64,
    },
    /// `backward` was called on a non-scalar node.
    NotScalar { shape: Vec<usize> },
    /// A node handle does not belong to the tape it was used with.
    DetachedTape,
    /// Optimizer step found a parameter without a gradient.
    MissingGrad { name: String },
    /// Invalid model or training configuration.
    InvalidConfig { what: String },
    /// A dataset-level precondition failed.
    EmptyDataset,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            TensorError::BadRank { op, expected, shape } => {
                write!(f, "{op}: expected rank {expected}, got shape {shape:?}")
            }
            TensorError::ConvGeometry {
                op,
                input,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "{op}: input extent {input} with kernel {kernel}, stride {stride}, \
                 padding {padding} yields no output"
            ),
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            TensorError::DegenerateStats { count } => write!(
                f,
                "batchnorm2d: {count} value(s) per channel is too few for batch statistics"
            ),
            TensorError::InvalidTarget { min, max } => {
                write!(f, "bce target values outside [0, 1]: range [{min}, {max}]")
            }
            TensorError::OutOfRange { op, min, max } => {
                write!(f, "{op}: input range [{min}, {max}] outside the valid domain")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::DetachedTape => write!(f, "node handle does not belong to this tape"),
            TensorError::MissingGrad { name } => {
                write!(f, "parameter '{name}' has no gradient")
            }
            TensorError::InvalidConfig { what } => write!(f, "invalid configuration: {what}"),
            TensorError::EmptyDataset => write!(f, "dataset is empty"),
        }
    }
}

impl core::error::Error for TensorError {}
