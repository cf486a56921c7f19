//! Optimizing backend: algebraic simplification, common-subexpression and
//! dead-code elimination, elementwise fusion, buffer planning with donation,
//! and a cache of compiled programs keyed by graph structure.

mod cache;
mod fusion;
mod memory;
mod passes;
mod program;

pub use cache::CompileCache;
pub use fusion::{fuse_elementwise, unfused_steps, FusedKernel, FusedOp, PlanStep, StepKind};
pub use memory::{plan_memory, BufferPlan, DonationRequest, Loc};
pub use passes::{cse, dce, simplify, SimplifyOptions};
pub use program::{Binding, CompiledProgram, Execution, ParamInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompileOptions {
    /// Run simplify and CSE before scheduling.
    pub optimize: bool,
    /// Group elementwise nodes into fused kernels.
    pub fuse: bool,
    pub simplify: SimplifyOptions,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { optimize: true, fuse: true, simplify: SimplifyOptions::default() }
    }
}
