//! Library side of the `lt` tool: demo workloads, the lazy/eager
//! differential fuzzer, and run reports.

pub mod fuzz;
pub mod report;
pub mod workloads;
