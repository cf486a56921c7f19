//! Reference CPU backend: host buffers, one kernel per op kind, and the
//! eager-only operations that have no compiler lowering.
//!
//! Every kernel here is also what the compiled path runs for non-fusible
//! steps, and the fused interpreter uses the same scalar functions, so the two
//! paths agree bit for bit.

mod buffer;
mod fallback;
mod interp;
pub(crate) mod kernels;
mod registry;
mod rng;

pub use buffer::{Buffer, BufferId, HostData};
pub use fallback::{extra_eager_only, EagerOnlyOp};
pub use interp::evaluate;
pub use registry::KernelRegistry;
pub use rng::randn_data;
