//! Error type shared by every module in the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor kernels, bound propagation, model assembly,
/// dataset parsing and checkpoint I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor was built with a data buffer that does not match its shape.
    DataLength { expected: usize, got: usize },
    /// Two operands disagree on a specific axis.
    DimensionMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// An operand has the wrong rank for the kernel.
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Spatial dims must divide evenly (2x2 pooling) or produce a positive
    /// output extent (convolution).
    BadGeometry { op: &'static str, detail: String },
    /// Class label outside [0, num_classes).
    LabelOutOfRange { label: usize, classes: usize },
    /// An interval intersection came out empty.
    EmptyInterval { index: usize, lower: f32, upper: f32 },
    /// Interval constructed with lower > upper.
    InvalidInterval { index: usize, lower: f32, upper: f32 },
    /// A hyperparameter is outside its valid range.
    InvalidParameter { name: &'static str, detail: String },
    /// Layer sequence in a model spec is inconsistent.
    InvalidSpec(String),
    /// Dataset file failed to parse.
    DatasetFormat(String),
    /// Checkpoint file failed to parse.
    CheckpointFormat(String),
    /// Checkpoint blob shorter than its manifest claims.
    Truncated { expected: usize, got: usize },
    /// Underlying I/O failure, with the path that caused it.
    Io { path: String, detail: String },
    /// An attack could not produce a usable result.
    AttackFailed(String),
    /// Fine-tuning failed to converge (e.g. epsilon below the trainable floor).
    NonConvergence(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Error::DimensionMismatch { op, axis, expected, got } => {
                write!(f, "{op}: {axis} mismatch, expected {expected}, got {got}")
            }
            Error::RankMismatch { op, expected, got } => {
                write!(f, "{op}: expected rank {expected} tensor, got rank {got}")
            }
            Error::BadGeometry { op, detail } => write!(f, "{op}: {detail}"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::EmptyInterval { index, lower, upper } => {
                write!(f, "empty interval at index {index}: lower {lower} > upper {upper}")
            }
            Error::InvalidInterval { index, lower, upper } => {
                write!(f, "invalid interval at index {index}: lower {lower} > upper {upper}")
            }
            Error::InvalidParameter { name, detail } => write!(f, "invalid {name}: {detail}"),
            Error::InvalidSpec(detail) => write!(f, "invalid model spec: {detail}"),
            Error::DatasetFormat(detail) => write!(f, "dataset format error: {detail}"),
            Error::CheckpointFormat(detail) => write!(f, "checkpoint format error: {detail}"),
            Error::Truncated { expected, got } => {
                write!(f, "file truncated: expected {expected} bytes, got {got}")
            }
            Error::Io { path, detail } => write!(f, "io error on {path}: {detail}"),
            Error::AttackFailed(detail) => write!(f, "attack failed: {detail}"),
            Error::NonConvergence(detail) => write!(f, "non-convergence: {detail}"),
        }
    }
}

impl std::error::Error for Error {}
