//! Device contexts, liveness tracking, the step barrier, donation policy,
//! and asynchronous execution.

mod executor;
mod metrics;
mod slot;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, OnceLock, Weak};

use parking_lot::Mutex;

use crate::compiler::{Binding, CompileCache, CompileOptions, CompiledProgram, DonationRequest};
use crate::eager::KernelRegistry;
use crate::error::{Error, Result};
use crate::ir::{canonicalize, dump_text, CanonicalForm, Device, IrGraph, NodeAttrs, NodeId, OpKind, Scalar, Shape};
use crate::tensor::{LazyTensor, State, TensorCell, ViewOp};

pub(crate) use executor::Executor;
pub(crate) use metrics::Metrics;
pub use metrics::MetricsSnapshot;
pub(crate) use slot::Slot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Record operations and run them as compiled programs at barriers.
    Lazy,
    /// Dispatch every operation immediately on the eager backend.
    Eager,
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub mode: Mode,
    /// Devices `CPU:0 .. CPU:{devices-1}` exist.
    pub devices: u32,
    /// Allow in-place-overwritten inputs to be donated at full barriers.
    pub donation: bool,
    pub compile: CompileOptions,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig { mode: Mode::Lazy, devices: 2, donation: true, compile: CompileOptions::default() }
    }
}

impl RuntimeConfig {
    pub fn eager() -> Self {
        RuntimeConfig { mode: Mode::Eager, ..Default::default() }
    }

    /// Defaults, except that `LT_DONATION=0` turns donation off.
    pub fn from_env() -> Self {
        let donation = std::env::var("LT_DONATION").map_or(true, |v| v.trim() != "0");
        RuntimeConfig { donation, ..Default::default() }
    }
}

/// Where a graph leaf gets its value from.
#[derive(Clone)]
pub(crate) enum LeafSource {
    Slot(Arc<Slot>),
    Scalar(Scalar),
}

/// The open graph of one device and the side tables that bind its leaves.
pub(crate) struct GraphState {
    pub(crate) graph: IrGraph,
    leaves: HashMap<NodeId, LeafSource>,
    slot_leaf: HashMap<u64, NodeId>,
    /// Slot id of a buffer replaced by an in-place update -> uid of the
    /// tensor whose new value replaced it.
    overwritten: HashMap<u64, u64>,
}

impl GraphState {
    fn new(device: Device) -> Self {
        GraphState { graph: IrGraph::new(device), leaves: HashMap::new(), slot_leaf: HashMap::new(), overwritten: HashMap::new() }
    }

    fn reset(&mut self) {
        *self = GraphState::new(self.graph.device());
    }

    pub(crate) fn record(&mut self, kind: OpKind, operands: &[NodeId], attrs: NodeAttrs) -> Result<NodeId> {
        self.graph.record_node(kind, operands, attrs)
    }

    /// A host scalar as a node: `0`/`1` as constants, anything else as a
    /// dynamic parameter.
    pub(crate) fn scalar(&mut self, value: Scalar) -> NodeId {
        let (id, dynamic) = self.graph.wrap_scalar(value);
        if let Some(v) = dynamic {
            self.leaves.insert(id, LeafSource::Scalar(v));
        }
        id
    }

    fn leaf_for(&mut self, slot: &Arc<Slot>, shape: &Shape) -> NodeId {
        if let Some(&id) = self.slot_leaf.get(&slot.id()) {
            return id;
        }
        let id = self.graph.device_data(shape.clone());
        self.leaves.insert(id, LeafSource::Slot(slot.clone()));
        self.slot_leaf.insert(slot.id(), id);
        id
    }

    /// The node holding a tensor's current value, re-deriving stale views
    /// from their base first.
    pub(crate) fn node_of(&mut self, t: &TensorCell) -> Result<NodeId> {
        if t.is_stale_view() {
            return self.refresh_view(t);
        }
        let state = t.state.lock();
        match &*state {
            State::Pending(id) => Ok(*id),
            State::Data(slot) => {
                let slot = slot.clone();
                drop(state);
                Ok(self.leaf_for(&slot, &t.shape))
            }
        }
    }

    /// Applies `ops` forward from `base`, returning every intermediate
    /// (`chain[0] == base`).
    pub(crate) fn view_chain(&mut self, base: NodeId, ops: &[ViewOp]) -> Result<Vec<NodeId>> {
        let mut chain = vec![base];
        for op in ops {
            let (kind, attrs) = op.lower();
            let next = self.record(kind, &[*chain.last().expect("non-empty")], attrs)?;
            chain.push(next);
        }
        Ok(chain)
    }

    fn refresh_view(&mut self, t: &TensorCell) -> Result<NodeId> {
        let view = t.view.as_ref().expect("refresh of a view");
        let base_node = self.node_of(&view.base.0)?;
        let chain = self.view_chain(base_node, &view.ops)?;
        let id = *chain.last().expect("non-empty");
        *t.state.lock() = State::Pending(id);
        view.sync_generation();
        Ok(id)
    }

    /// Marks `t`'s current buffer, if any, as replaced by `t`'s next value.
    pub(crate) fn note_overwrite(&mut self, t: &TensorCell) {
        if let State::Data(slot) = &*t.state.lock() {
            self.overwritten.entry(slot.id()).or_insert(t.uid);
        }
    }
}

pub(crate) struct DeviceContext {
    device: Device,
    pub(crate) graph: Mutex<GraphState>,
    live: Mutex<BTreeMap<u64, Weak<TensorCell>>>,
    pub(crate) metrics: Arc<Metrics>,
    cache: CompileCache,
    executor: OnceLock<Executor>,
}

impl DeviceContext {
    fn executor(&self) -> &Executor {
        self.executor.get_or_init(|| Executor::spawn(self.device))
    }

    /// Live tensors in uid order. Handles are upgraded under the registry
    /// lock and released after it, so drops never re-enter it.
    pub(crate) fn live_cells(&self) -> Vec<Arc<TensorCell>> {
        self.live.lock().values().filter_map(Weak::upgrade).collect()
    }
}

pub(crate) struct RuntimeInner {
    pub(crate) config: RuntimeConfig,
    contexts: Vec<DeviceContext>,
    pub(crate) registry: KernelRegistry,
}

/// Process-level runtime handle. Clones share all state. Independent
/// runtimes share nothing, which keeps tests isolated.
#[derive(Clone)]
pub struct Runtime(pub(crate) Arc<RuntimeInner>);

/// One compiled launch in flight.
struct Launch {
    slots: Vec<Arc<Slot>>,
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Runtime {
        let contexts = (0..config.devices)
            .map(|d| DeviceContext {
                device: Device(d),
                graph: Mutex::new(GraphState::new(Device(d))),
                live: Mutex::new(BTreeMap::new()),
                metrics: Arc::new(Metrics::default()),
                cache: CompileCache::new(config.compile),
                executor: OnceLock::new(),
            })
            .collect();
        Runtime(Arc::new(RuntimeInner { config, contexts, registry: KernelRegistry::new() }))
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.0.config
    }

    pub fn mode(&self) -> Mode {
        self.0.config.mode
    }

    pub fn devices(&self) -> Vec<Device> {
        self.0.contexts.iter().map(|c| c.device).collect()
    }

    pub(crate) fn ctx(&self, device: Device) -> Result<&DeviceContext> {
        self.0.contexts.get(device.0 as usize).ok_or(Error::UnknownDevice(device))
    }

    /// Adds a tensor to its device's live set.
    pub(crate) fn register_tensor(&self, cell: &Arc<TensorCell>) -> Result<()> {
        let mut live = self.ctx(cell.device)?.live.lock();
        if live.contains_key(&cell.uid) {
            return Err(Error::DuplicateUid(cell.uid));
        }
        live.insert(cell.uid, Arc::downgrade(cell));
        Ok(())
    }

    /// Removes a tensor from its device's live set. Tensors unregister
    /// themselves when dropped.
    pub fn unregister_tensor(&self, device: Device, uid: u64) -> Result<()> {
        let removed = self.ctx(device)?.live.lock().remove(&uid);
        removed.map(|_| ()).ok_or(Error::UnknownUid(uid))
    }

    /// Number of live tensors on `device`.
    pub fn live_count(&self, device: Device) -> Result<usize> {
        Ok(self.ctx(device)?.live.lock().len())
    }

    /// A consistent snapshot: waits for queued executions first.
    pub fn metrics(&self, device: Device) -> Result<MetricsSnapshot> {
        let ctx = self.ctx(device)?;
        if let Some(ex) = ctx.executor.get() {
            ex.flush()?;
        }
        Ok(ctx.metrics.snapshot())
    }

    /// Number of nodes in the device's open graph.
    pub fn open_graph_len(&self, device: Device) -> Result<usize> {
        Ok(self.ctx(device)?.graph.lock().graph.len())
    }

    /// Text dump of the graph that would compute `tensors`, in canonical
    /// form. Does not execute anything.
    pub fn dump_ir(&self, tensors: &[&LazyTensor]) -> Result<String> {
        let (_, canon) = self.pending_form(tensors)?;
        dump_text(&canon.graph, &canon.roots)
    }

    /// The step schedule `tensors` would compile to. Bypasses the cache and
    /// leaves metrics untouched.
    pub fn dump_plan(&self, tensors: &[&LazyTensor]) -> Result<String> {
        let (device, canon) = self.pending_form(tensors)?;
        let program = CompiledProgram::compile(&canon, self.ctx(device)?.cache.options())?;
        program.dump_plan(&[])
    }

    fn pending_form(&self, tensors: &[&LazyTensor]) -> Result<(Device, CanonicalForm)> {
        let device = tensors.first().ok_or(Error::EmptyRoots)?.device();
        let ctx = self.ctx(device)?;
        let mut g = ctx.graph.lock();
        let mut roots = Vec::with_capacity(tensors.len());
        for t in tensors {
            if t.device() != device {
                return Err(Error::DeviceMismatch(device, t.device()));
            }
            roots.push(g.node_of(&t.0)?);
        }
        Ok((device, canonicalize(&g.graph, &roots)?))
    }

    /// The barrier. Every live pending tensor of `device` becomes a root of
    /// one program, which is compiled (or fetched from the cache) and queued
    /// for execution; the open graph then starts over. With `wait`, returns
    /// only after the program has finished. Execution errors are latched
    /// into the root tensors and surface when they are read.
    pub fn mark_step(&self, device: Device, wait: bool) -> Result<()> {
        let ctx = self.ctx(device)?;
        if self.mode() == Mode::Eager {
            return Ok(());
        }
        let live = ctx.live_cells();
        let launch = {
            let mut g = ctx.graph.lock();
            for cell in &live {
                if cell.is_stale_view() {
                    g.node_of(cell)?;
                }
            }
            let roots: Vec<(&Arc<TensorCell>, NodeId)> = live.iter().filter_map(|c| c.pending_node().map(|n| (c, n))).collect();
            if roots.is_empty() {
                g.reset();
                return Ok(());
            }
            let launch = self.launch(ctx, &mut g, &roots, &live, self.0.config.donation);
            g.reset();
            launch
        };
        drop(live);
        if wait {
            for s in &launch.slots {
                let _ = s.wait();
            }
        }
        Ok(())
    }

    /// Materializes `t` alone, leaving other pending work in the open graph.
    /// The computed node becomes a leaf bound to the result, so later
    /// programs reuse it instead of recomputing it. Never donates.
    pub fn sync_tensor(&self, t: &LazyTensor) -> Result<()> {
        if self.mode() == Mode::Eager {
            return Ok(());
        }
        let ctx = self.ctx(t.device())?;
        let launch = {
            let mut g = ctx.graph.lock();
            let node = g.node_of(&t.0)?;
            if t.0.pending_node().is_none() {
                return Ok(());
            }
            let launch = self.launch(ctx, &mut g, &[(&t.0, node)], &[], false);
            let slot = launch.slots[0].clone();
            if g.graph.node(node).kind != OpKind::DeviceData {
                g.graph.substitute_leaf(node);
                g.leaves.insert(node, LeafSource::Slot(slot.clone()));
                g.slot_leaf.insert(slot.id(), node);
            }
            launch
        };
        let _ = launch.slots[0].wait();
        Ok(())
    }

    /// Parameters that may be overwritten by this step's outputs. A buffer
    /// qualifies when it was replaced by an in-place update of a tensor that
    /// is a root here, only that root reads it, and no live tensor still
    /// holds it. Callers only ask at a full barrier, where every live
    /// pending tensor is a root and every root is final.
    fn donation_set(
        &self,
        g: &GraphState,
        canon: &CanonicalForm,
        roots: &[(&Arc<TensorCell>, NodeId)],
        live: &[Arc<TensorCell>],
    ) -> Vec<DonationRequest> {
        let mut readers: HashMap<usize, BTreeSet<usize>> = HashMap::new();
        for (r, &root) in canon.roots.iter().enumerate() {
            let mut seen = vec![false; canon.graph.len()];
            let mut stack = vec![root];
            while let Some(id) = stack.pop() {
                if std::mem::replace(&mut seen[id.0], true) {
                    continue;
                }
                let node = canon.graph.node(id);
                if let NodeAttrs::DeviceData { param_slot: Some(p), .. } = node.attrs {
                    readers.entry(p).or_default().insert(r);
                }
                stack.extend(node.operands.iter().copied());
            }
        }
        let mut out = Vec::new();
        for (p, desc) in canon.params.iter().enumerate() {
            let Some(LeafSource::Slot(slot)) = g.leaves.get(&desc.source) else { continue };
            let Some(&owner) = g.overwritten.get(&slot.id()) else { continue };
            let Some(r) = roots.iter().position(|(c, _)| c.uid == owner) else { continue };
            if canon.roots.contains(&desc.canonical) || canon.graph.shape(canon.roots[r]) != &desc.shape {
                continue;
            }
            if readers.get(&p).is_some_and(|rs| rs.iter().any(|&x| x != r)) {
                continue;
            }
            if live.iter().any(|c| c.holds_slot(slot.id())) {
                continue;
            }
            out.push(DonationRequest { param: p, output: Some(r) });
        }
        out
    }

    fn launch(
        &self,
        ctx: &DeviceContext,
        g: &mut GraphState,
        roots: &[(&Arc<TensorCell>, NodeId)],
        live: &[Arc<TensorCell>],
        donate: bool,
    ) -> Launch {
        let slots: Vec<Arc<Slot>> = roots.iter().map(|_| Slot::pending()).collect();
        let nodes: Vec<NodeId> = roots.iter().map(|(_, n)| *n).collect();
        let prepared = canonicalize(&g.graph, &nodes).and_then(|canon| {
            let (program, hit) = ctx.cache.get_or_compile(&canon)?;
            let counter = if hit { &ctx.metrics.cache_hit_count } else { &ctx.metrics.compile_count };
            Metrics::bump(counter, 1);
            let bindings: Vec<LeafSource> = canon
                .params
                .iter()
                .map(|p| g.leaves.get(&p.source).cloned().ok_or(Error::UnknownNode(p.source.0)))
                .collect::<Result<_>>()?;
            let mut donations = if donate { self.donation_set(g, &canon, roots, live) } else { Vec::new() };
            donations.retain(|d| !program.returns_param(d.param));
            Ok((program, bindings, donations))
        });
        for ((cell, _), slot) in roots.iter().zip(&slots) {
            *cell.state.lock() = State::Data(slot.clone());
        }
        let (program, bindings, donations) = match prepared {
            Ok(p) => p,
            Err(e) => {
                slots.iter().for_each(|s| s.fill(Err(e.clone())));
                return Launch { slots };
            }
        };
        let metrics = ctx.metrics.clone();
        let outputs = slots.clone();
        let job = move || {
            let resolved: Result<Vec<Binding>> = bindings
                .iter()
                .map(|b| match b {
                    LeafSource::Slot(s) => s.wait().map(Binding::Buffer),
                    LeafSource::Scalar(v) => Ok(Binding::Scalar(*v)),
                })
                .collect();
            match resolved.and_then(|b| program.execute(&b, &donations)) {
                Ok(exec) => {
                    Metrics::bump(&metrics.graphs_executed, 1);
                    Metrics::bump(&metrics.kernel_dispatches, exec.dispatches);
                    Metrics::bump(&metrics.aliased_outputs, exec.aliased.len() as u64);
                    metrics.peak_buffer_slots.fetch_max(exec.fresh_slots as u64, std::sync::atomic::Ordering::Relaxed);
                    for (slot, buf) in outputs.iter().zip(exec.outputs) {
                        slot.fill(Ok(buf));
                    }
                }
                Err(e) => outputs.iter().for_each(|s| s.fill(Err(e.clone()))),
            }
        };
        if let Err(e) = ctx.executor().submit(job) {
            slots.iter().for_each(|s| s.fill(Err(e.clone())));
        }
        Launch { slots }
    }
}

impl Default for Runtime {
    fn default() -> Self {
        Runtime::new(RuntimeConfig::default())
    }
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").field("config", &self.0.config).finish()
    }
}
