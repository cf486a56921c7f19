//! Lazy tensors: operations record an IR graph that is compiled, cached, and
//! run at barriers, while the API reads like an eager library.

pub mod compiler;
pub mod eager;
pub mod error;
pub mod ir;
pub mod runtime;
pub mod tensor;

pub use eager::{Buffer, BufferId, EagerOnlyOp, HostData};
pub use error::{Error, Result};
pub use ir::{DType, Device, Scalar, Shape};
pub use runtime::{MetricsSnapshot, Mode, Runtime, RuntimeConfig};
pub use tensor::{InPlaceOp, LazyTensor, Rhs, ViewOp};
