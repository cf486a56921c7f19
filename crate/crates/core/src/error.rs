use thiserror::Error;

use crate::ir::{Device, Shape};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by recording, compiling, or executing tensor programs.
///
/// Errors are `Clone` because a failure during asynchronous execution is
/// latched into every tensor produced by the failing program.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("dtype mismatch in {op}: {lhs} vs {rhs}")]
    DTypeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("invalid attributes for {op}: {reason}")]
    InvalidAttrs { op: &'static str, reason: String },
    #[error("{op} expects {expected} operand(s), got {got}")]
    ArityMismatch { op: &'static str, expected: usize, got: usize },
    #[error("operands live on different devices: {0} and {1}")]
    DeviceMismatch(Device, Device),
    #[error("unknown device {0}")]
    UnknownDevice(Device),
    #[error("node %{0} does not exist in the graph")]
    UnknownNode(usize),
    #[error("graph has no roots")]
    EmptyRoots,
    #[error("host data has {got} elements, shape {shape} needs {expected}")]
    LengthMismatch { shape: Shape, expected: usize, got: usize },
    #[error("buffer #{0} was donated to a computation and can no longer be used")]
    UseAfterDonation(u64),
    #[error("integer division by zero")]
    DivisionByZero,
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error("tensor uid {0} is already registered")]
    DuplicateUid(u64),
    #[error("tensor uid {0} is not registered")]
    UnknownUid(u64),
    #[error("invalid donation of parameter {param}: {reason}")]
    InvalidDonation { param: usize, reason: String },
    #[error("invalid view: {0}")]
    InvalidView(String),
    #[error("expected a rank-0 tensor, got {0}")]
    RankError(Shape),
    #[error("binding {index} does not match parameter: {reason}")]
    BindingMismatch { index: usize, reason: String },
    #[error("executor for device {0} has shut down")]
    ExecutorGone(Device),
}
