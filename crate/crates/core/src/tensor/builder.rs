use std::sync::atomic::Ordering;
use std::sync::Arc;

use parking_lot::MutexGuard;

use super::{index_map, LazyTensor, State, TensorCell, ViewInfo};
use crate::eager::{Buffer, HostData};
use crate::error::{Error, Result};
use crate::ir::{Device, NodeAttrs, NodeId, OpKind, Scalar, Shape};
use crate::runtime::{GraphState, Metrics, Mode, Runtime, Slot};

/// An intermediate value: a node of the open graph in lazy mode, a computed
/// buffer in eager mode.
#[derive(Clone)]
pub(crate) enum Val {
    Node(NodeId),
    Buf(Buffer),
}

/// Builds one user-level operation out of primitive ops, recording them
/// (lazy) or running them right away (eager). Holding a builder holds the
/// device's graph lock.
pub(crate) struct Builder<'a> {
    rt: &'a Runtime,
    device: Device,
    graph: Option<MutexGuard<'a, GraphState>>,
}

impl<'a> Builder<'a> {
    pub(crate) fn new(rt: &'a Runtime, device: Device) -> Result<Builder<'a>> {
        let ctx = rt.ctx(device)?;
        let graph = match rt.mode() {
            Mode::Lazy => Some(ctx.graph.lock()),
            Mode::Eager => None,
        };
        Ok(Builder { rt, device, graph })
    }

    pub(crate) fn graph(&mut self) -> Option<&mut GraphState> {
        self.graph.as_deref_mut()
    }

    fn check_device(&self, t: &LazyTensor) -> Result<()> {
        if t.device() != self.device {
            return Err(Error::DeviceMismatch(self.device, t.device()));
        }
        Ok(())
    }

    /// The current value of `t`.
    pub(crate) fn tensor(&mut self, t: &LazyTensor) -> Result<Val> {
        self.check_device(t)?;
        match &mut self.graph {
            Some(g) => g.node_of(&t.0).map(Val::Node),
            None => eager_value(&t.0).map(Val::Buf),
        }
    }

    pub(crate) fn shape(&self, v: &Val) -> Shape {
        match v {
            Val::Node(n) => self.graph.as_ref().expect("lazy builder").graph.shape(*n).clone(),
            Val::Buf(b) => b.shape().clone(),
        }
    }

    pub(crate) fn op(&mut self, kind: OpKind, inputs: &[Val], attrs: NodeAttrs) -> Result<Val> {
        match &mut self.graph {
            Some(g) => {
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .map(|v| match v {
                        Val::Node(n) => *n,
                        Val::Buf(_) => unreachable!("lazy builder holds nodes"),
                    })
                    .collect();
                g.record(kind, &ids, attrs).map(Val::Node)
            }
            None => {
                let bufs: Vec<Buffer> = inputs
                    .iter()
                    .map(|v| match v {
                        Val::Buf(b) => b.clone(),
                        Val::Node(_) => unreachable!("eager builder holds buffers"),
                    })
                    .collect();
                let out = self.rt.0.registry.dispatch(self.device, kind, &bufs, &attrs)?;
                Metrics::bump(&self.rt.ctx(self.device)?.metrics.kernel_dispatches, 1);
                Ok(Val::Buf(out))
            }
        }
    }

    pub(crate) fn scalar(&mut self, value: Scalar) -> Result<Val> {
        match &mut self.graph {
            Some(g) => Ok(Val::Node(g.scalar(value))),
            None => self.op(OpKind::Constant, &[], NodeAttrs::Constant { value }),
        }
    }

    /// `value` broadcast to `dims` via `Expand`.
    pub(crate) fn splat(&mut self, value: Scalar, dims: &[usize]) -> Result<Val> {
        let s = self.scalar(value)?;
        self.op(OpKind::Expand, &[s], NodeAttrs::Expand { dims: dims.to_vec() })
    }

    fn state_of(v: Val) -> State {
        match v {
            Val::Node(n) => State::Pending(n),
            Val::Buf(b) => State::Data(Slot::ready(b)),
        }
    }

    /// Wraps `v` in a new tensor.
    pub(crate) fn finish(self, v: Val, view: Option<ViewInfo>) -> Result<LazyTensor> {
        let shape = self.shape(&v);
        let (rt, device) = (self.rt.clone(), self.device);
        drop(self.graph);
        LazyTensor::create(&rt, device, shape, Builder::state_of(v), view)
    }

    /// Makes `v` the new value of `t`, keeping its uid.
    pub(crate) fn replace(&mut self, t: &TensorCell, v: Val) {
        if let Some(g) = &mut self.graph {
            g.note_overwrite(t);
        }
        *t.state.lock() = Builder::state_of(v);
        t.mutations.fetch_add(1, Ordering::AcqRel);
    }
}

/// The value of a tensor in eager mode. Views read through to their base.
pub(crate) fn eager_value(t: &TensorCell) -> Result<Buffer> {
    match &t.view {
        Some(v) => {
            let base = eager_value(&v.base.0)?;
            let index = v.index.as_ref().expect("eager views carry an index map");
            let data = gather(&*base.data()?, index);
            Buffer::from_host(data, &t.shape.dims, t.device)
        }
        None => t.slot().expect("eager tensors hold data").wait(),
    }
}

pub(crate) fn gather(data: &HostData, index: &[usize]) -> HostData {
    match data {
        HostData::F32(v) => HostData::F32(index.iter().map(|&i| v[i]).collect()),
        HostData::I64(v) => HostData::I64(index.iter().map(|&i| v[i]).collect()),
        HostData::Pred(v) => HostData::Pred(index.iter().map(|&i| v[i]).collect()),
    }
}

/// Writes `values[k]` to position `index[k]` of a copy of `base`.
pub(crate) fn scatter(base: &HostData, index: &[usize], values: &HostData) -> HostData {
    fn go<T: Copy>(base: &[T], index: &[usize], values: &[T]) -> Vec<T> {
        let mut out = base.to_vec();
        for (k, &i) in index.iter().enumerate() {
            out[i] = values[k];
        }
        out
    }
    match (base, values) {
        (HostData::F32(b), HostData::F32(v)) => HostData::F32(go(b, index, v)),
        (HostData::I64(b), HostData::I64(v)) => HostData::I64(go(b, index, v)),
        (HostData::Pred(b), HostData::Pred(v)) => HostData::Pred(go(b, index, v)),
        _ => unreachable!("view values share the base dtype"),
    }
}

/// Eager in-place update through a view: scatter the new view values into
/// the base.
pub(crate) fn eager_view_write(view: &TensorCell, values: &Buffer) -> Result<()> {
    let info = view.view.as_ref().expect("view");
    let base = &info.base.0;
    let current = eager_value(base)?;
    let index = info.index.as_ref().expect("eager views carry an index map");
    let updated = scatter(&*current.data()?, index, &*values.data()?);
    let buf = Buffer::from_host(updated, &base.shape.dims, base.device)?;
    *base.state.lock() = State::Data(Slot::ready(buf));
    base.mutations.fetch_add(1, Ordering::AcqRel);
    Ok(())
}

pub(crate) fn eager_index(base: &Shape, ops: &[super::ViewOp]) -> Result<Arc<Vec<usize>>> {
    index_map(base, ops).map(Arc::new)
}
