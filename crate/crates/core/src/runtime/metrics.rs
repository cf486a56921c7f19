use std::sync::atomic::{AtomicU64, Ordering};

/// Per-device counters. All of them only ever grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub compile_count: u64,
    pub cache_hit_count: u64,
    pub graphs_executed: u64,
    /// Compiled kernel launches (a fused step counts once). In eager mode,
    /// every eager kernel launch.
    pub kernel_dispatches: u64,
    pub eager_fallback_dispatches: u64,
    /// Largest number of freshly allocated buffer slots any one execution
    /// needed.
    pub peak_buffer_slots: u64,
    /// Outputs written into donated input buffers.
    pub aliased_outputs: u64,
}

impl MetricsSnapshot {
    pub const FIELDS: [&'static str; 7] = [
        "compile_count",
        "cache_hit_count",
        "graphs_executed",
        "kernel_dispatches",
        "eager_fallback_dispatches",
        "peak_buffer_slots",
        "aliased_outputs",
    ];

    /// `(name, value)` pairs in a fixed order.
    pub fn fields(&self) -> [(&'static str, u64); 7] {
        let v = [
            self.compile_count,
            self.cache_hit_count,
            self.graphs_executed,
            self.kernel_dispatches,
            self.eager_fallback_dispatches,
            self.peak_buffer_slots,
            self.aliased_outputs,
        ];
        std::array::from_fn(|i| (Self::FIELDS[i], v[i]))
    }

    /// Counter-wise difference, for measuring one region of a program.
    /// `peak_buffer_slots` is a maximum, so it is carried over unchanged.
    pub fn since(&self, earlier: &MetricsSnapshot) -> MetricsSnapshot {
        MetricsSnapshot {
            compile_count: self.compile_count - earlier.compile_count,
            cache_hit_count: self.cache_hit_count - earlier.cache_hit_count,
            graphs_executed: self.graphs_executed - earlier.graphs_executed,
            kernel_dispatches: self.kernel_dispatches - earlier.kernel_dispatches,
            eager_fallback_dispatches: self.eager_fallback_dispatches - earlier.eager_fallback_dispatches,
            peak_buffer_slots: self.peak_buffer_slots,
            aliased_outputs: self.aliased_outputs - earlier.aliased_outputs,
        }
    }
}

#[derive(Default)]
pub(crate) struct Metrics {
    pub compile_count: AtomicU64,
    pub cache_hit_count: AtomicU64,
    pub graphs_executed: AtomicU64,
    pub kernel_dispatches: AtomicU64,
    pub eager_fallback_dispatches: AtomicU64,
    pub peak_buffer_slots: AtomicU64,
    pub aliased_outputs: AtomicU64,
}

impl Metrics {
    pub(crate) fn bump(counter: &AtomicU64, by: u64) {
        counter.fetch_add(by, Ordering::Relaxed);
    }

    pub(crate) fn snapshot(&self) -> MetricsSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Acquire);
        MetricsSnapshot {
            compile_count: get(&self.compile_count),
            cache_hit_count: get(&self.cache_hit_count),
            graphs_executed: get(&self.graphs_executed),
            kernel_dispatches: get(&self.kernel_dispatches),
            eager_fallback_dispatches: get(&self.eager_fallback_dispatches),
            peak_buffer_slots: get(&self.peak_buffer_slots),
            aliased_outputs: get(&self.aliased_outputs),
        }
    }
}
