// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Everything that can go wrong while describing, emulating or modelling the
/// accelerator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-integral output dimension: ({width} - {kernel} + 2*{pad}) is not divisible by stride {stride}")]
    NonIntegralOutputDim {
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },

    #[error("layer {layer}: non-integral output dimension")]
    LayerOutputDim { layer: usize },

    #[error("layer {layer}: shape mismatch: {reason}")]
    ShapeMismatch { layer: usize, reason: String },

    #[error("invalid layer: {0}")]
    InvalidLayer(String),

    #[error("invalid accelerator config: {0}")]
    InvalidConfig(String),

    #[error("invalid device profile: {0}")]
    InvalidDevice(String),

    #[error("stream underrun: {0}")]
    StreamUnderrun(String),

    #[error("stream overrun: {0}")]
    StreamOverrun(String),

    #[error("plan does not match tensors: {0}")]
    PlanMismatch(String),

    #[error("pooling stream ended mid-row: received {received} of {expected} pixels")]
    IncompleteRow { received: usize, expected: usize },

    #[error("invalid table range: {0}")]
    InvalidRange(String),

    #[error("channel {0} is closed")]
    ChannelClosed(String),

    #[error("pipeline deadlock: {0}")]
    Deadlock(String),

    #[error("no feasible design point")]
    NoFeasiblePoint,

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("network validation failed: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Error>),

    #[error("bad tensor file magic")]
    BadMagic,

    #[error("unsupported tensor element kind {0:?}")]
    UnsupportedKind(String),

    #[error("tensor dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("short read: expected {expected} bytes, got {actual}")]
    ShortRead { expected: usize, actual: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
