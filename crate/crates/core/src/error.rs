use std::fmt;

use thiserror::Error;

/// Names a tensor axis in shape errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rank,
    Height,
    Width,
    Channel,
    KernelHeight,
    KernelWidth,
    OutChannel,
    Length,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::Rank => "rank",
            Axis::Height => "height",
            Axis::Width => "width",
            Axis::Channel => "channel",
            Axis::KernelHeight => "kernel height",
            Axis::KernelWidth => "kernel width",
            Axis::OutChannel => "output channel",
            Axis::Length => "length",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {axis} axis (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        axis: Axis,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {axis} extent {extent} is not divisible by {divisor}")]
    NotDivisible {
        op: &'static str,
        axis: Axis,
        extent: usize,
        divisor: usize,
    },
    #[error("{op}: {axis} extent {extent} must be even")]
    OddExtent {
        op: &'static str,
        axis: Axis,
        extent: usize,
    },
    #[error("{op}: kernel {kernel} does not fit in {axis} extent {extent}")]
    KernelTooLarge {
        op: &'static str,
        axis: Axis,
        kernel: usize,
        extent: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward before forward: {0}")]
    BackwardBeforeForward(String),
}

/// Crate-level error. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed feature file: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Tensor(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
