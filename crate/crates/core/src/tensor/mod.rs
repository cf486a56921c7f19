//! The user-facing tensor API. Operations look eager but, in lazy mode, only
//! record IR; values are produced at barriers or when the host observes them.

mod builder;

use std::fmt::Write as _;
use std::ops;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::eager::{randn_data, Buffer, BufferId, EagerOnlyOp, HostData};
use crate::error::{Error, Result};
use crate::ir::{infer_shape, DType, Device, NodeAttrs, NodeId, OpKind, Scalar, Shape};
use crate::runtime::{Metrics, Mode, Runtime, Slot};
use builder::{eager_index, eager_value, eager_view_write, Builder, Val};

pub(crate) enum State {
    Pending(NodeId),
    Data(Arc<Slot>),
}

/// A view operation. Views never copy: they describe how to derive their
/// value from the base, and writes through them update the base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViewOp {
    Reshape { dims: Vec<usize> },
    Permute { perm: Vec<usize> },
    Narrow { dim: usize, start: usize, length: usize },
}

impl ViewOp {
    pub(crate) fn lower(&self) -> (OpKind, NodeAttrs) {
        match self {
            ViewOp::Reshape { dims } => (OpKind::Reshape, NodeAttrs::Reshape { dims: dims.clone() }),
            ViewOp::Permute { perm } => (OpKind::Permute, NodeAttrs::Permute { perm: perm.clone() }),
            ViewOp::Narrow { dim, start, length } => {
                (OpKind::Narrow, NodeAttrs::Narrow { dim: *dim, start: *start, length: *length })
            }
        }
    }

    fn apply(&self, shape: &Shape) -> Result<Shape> {
        let (kind, attrs) = self.lower();
        infer_shape(kind, std::slice::from_ref(shape), &attrs).map_err(|e| Error::InvalidView(e.to_string()))
    }
}

/// Flat positions in the base that each element of the view reads, found by
/// running the view ops over the base's iota.
pub(crate) fn index_map(base: &Shape, ops: &[ViewOp]) -> Result<Vec<usize>> {
    let mut shape = Shape::new(DType::I64, base.dims.clone());
    let mut data = HostData::I64((0..base.element_count() as i64).collect());
    for op in ops {
        let out = op.apply(&shape)?;
        let (kind, attrs) = op.lower();
        data = crate::eager::kernels::run(kind, &[&data], std::slice::from_ref(&shape), &attrs, &out)?;
        shape = out;
    }
    Ok(data.as_i64().expect("iota is s64").iter().map(|&i| i as usize).collect())
}

pub(crate) struct ViewInfo {
    /// Always a non-view tensor: views of views are flattened.
    pub(crate) base: LazyTensor,
    pub(crate) ops: Vec<ViewOp>,
    /// The base's mutation count this view's value was derived from.
    generation: AtomicU64,
    /// Eager mode only.
    pub(crate) index: Option<Arc<Vec<usize>>>,
}

impl ViewInfo {
    fn is_stale(&self) -> bool {
        self.generation.load(Ordering::Acquire) != self.base.0.mutations.load(Ordering::Acquire)
    }

    pub(crate) fn sync_generation(&self) {
        self.generation.store(self.base.0.mutations.load(Ordering::Acquire), Ordering::Release);
    }
}

pub(crate) struct TensorCell {
    pub(crate) uid: u64,
    pub(crate) device: Device,
    pub(crate) shape: Shape,
    rt: Runtime,
    pub(crate) state: Mutex<State>,
    pub(crate) view: Option<ViewInfo>,
    pub(crate) mutations: AtomicU64,
}

impl TensorCell {
    pub(crate) fn is_stale_view(&self) -> bool {
        self.view.as_ref().is_some_and(ViewInfo::is_stale)
    }

    pub(crate) fn pending_node(&self) -> Option<NodeId> {
        match &*self.state.lock() {
            State::Pending(n) => Some(*n),
            State::Data(_) => None,
        }
    }

    pub(crate) fn slot(&self) -> Option<Arc<Slot>> {
        match &*self.state.lock() {
            State::Data(s) => Some(s.clone()),
            State::Pending(_) => None,
        }
    }

    pub(crate) fn holds_slot(&self, id: u64) -> bool {
        self.slot().is_some_and(|s| s.id() == id)
    }
}

impl Drop for TensorCell {
    fn drop(&mut self) {
        let _ = self.rt.unregister_tensor(self.device, self.uid);
    }
}

/// Right-hand side of an in-place update.
#[derive(Clone, Copy)]
pub enum Rhs<'a> {
    Tensor(&'a LazyTensor),
    Scalar(Scalar),
}

impl<'a> From<&'a LazyTensor> for Rhs<'a> {
    fn from(t: &'a LazyTensor) -> Self {
        Rhs::Tensor(t)
    }
}

impl From<Scalar> for Rhs<'_> {
    fn from(s: Scalar) -> Self {
        Rhs::Scalar(s)
    }
}

impl From<f32> for Rhs<'_> {
    fn from(v: f32) -> Self {
        Rhs::Scalar(Scalar::F32(v))
    }
}

impl From<i64> for Rhs<'_> {
    fn from(v: i64) -> Self {
        Rhs::Scalar(Scalar::I64(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InPlaceOp {
    Add,
    Sub,
    Mul,
    /// Overwrite with the right-hand side.
    Assign,
}

/// A handle to a tensor. Clones are the same tensor (same uid); the tensor
/// leaves its device's live set when the last handle is dropped.
#[derive(Clone)]
pub struct LazyTensor(pub(crate) Arc<TensorCell>);

impl Runtime {
    /// A tensor holding `data`, laid out row-major in `dims`.
    pub fn from_host(&self, data: impl Into<HostData>, dims: &[usize], device: Device) -> Result<LazyTensor> {
        self.ctx(device)?;
        let buf = Buffer::from_host(data.into(), dims, device)?;
        LazyTensor::create(self, device, buf.shape().clone(), State::Data(Slot::ready(buf)), None)
    }

    pub fn full(&self, dims: &[usize], value: impl Into<Scalar>, device: Device) -> Result<LazyTensor> {
        let n = dims.iter().product();
        self.from_host(HostData::filled(value.into(), n), dims, device)
    }

    /// Standard-normal values from a stream determined by `seed` alone.
    pub fn randn(&self, dims: &[usize], device: Device, seed: u64) -> Result<LazyTensor> {
        self.from_host(randn_data(dims.iter().product(), seed), dims, device)
    }

    /// Shorthand for a rank-0 tensor.
    pub fn scalar(&self, value: impl Into<Scalar>, device: Device) -> Result<LazyTensor> {
        self.full(&[], value, device)
    }
}

fn next_uid() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

impl LazyTensor {
    pub(crate) fn create(rt: &Runtime, device: Device, shape: Shape, state: State, view: Option<ViewInfo>) -> Result<LazyTensor> {
        let cell = Arc::new(TensorCell {
            uid: next_uid(),
            device,
            shape,
            rt: rt.clone(),
            state: Mutex::new(state),
            view,
            mutations: AtomicU64::new(0),
        });
        rt.register_tensor(&cell)?;
        Ok(LazyTensor(cell))
    }

    pub fn uid(&self) -> u64 {
        self.0.uid
    }

    pub fn device(&self) -> Device {
        self.0.device
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn dims(&self) -> &[usize] {
        &self.0.shape.dims
    }

    pub fn dtype(&self) -> DType {
        self.0.shape.dtype
    }

    pub fn runtime(&self) -> &Runtime {
        &self.0.rt
    }

    /// Whether the value is still an unevaluated graph node.
    pub fn is_pending(&self) -> bool {
        self.0.pending_node().is_some()
    }

    pub fn is_view(&self) -> bool {
        self.0.view.is_some()
    }

    /// The tensor a view reads from and writes through. A view keeps its
    /// base alive, so the base stays in the live set while the view exists.
    pub fn base(&self) -> Option<&LazyTensor> {
        self.0.view.as_ref().map(|v| &v.base)
    }

    /// Times this tensor was updated in place.
    pub fn mutation_count(&self) -> u64 {
        self.0.mutations.load(Ordering::Acquire)
    }

    fn builder(&self) -> Result<Builder<'_>> {
        Builder::new(&self.0.rt, self.0.device)
    }

    fn unary(&self, kind: OpKind, attrs: NodeAttrs) -> Result<LazyTensor> {
        let mut b = self.builder()?;
        let x = b.tensor(self)?;
        let out = b.op(kind, &[x], attrs)?;
        b.finish(out, None)
    }

    /// `op(self, other)`. With `alpha`, `other` is first scaled:
    /// `op(self, expand(alpha) * other)`.
    pub fn binary(&self, kind: OpKind, other: &LazyTensor, alpha: Option<Scalar>) -> Result<LazyTensor> {
        if !kind.is_binary_elementwise() {
            return Err(Error::InvalidAttrs { op: kind.name(), reason: "not a binary elementwise op".into() });
        }
        let mut b = self.builder()?;
        let x = b.tensor(self)?;
        let mut y = b.tensor(other)?;
        if let Some(alpha) = alpha {
            let scale = b.splat(alpha, other.dims())?;
            y = b.op(OpKind::Mul, &[scale, y], NodeAttrs::None)?;
        }
        let out = b.op(kind, &[x, y], NodeAttrs::None)?;
        b.finish(out, None)
    }

    fn with_scalar(&self, kind: OpKind, value: Scalar) -> Result<LazyTensor> {
        let mut b = self.builder()?;
        let x = b.tensor(self)?;
        let s = b.splat(value, self.dims())?;
        let out = b.op(kind, &[x, s], NodeAttrs::None)?;
        b.finish(out, None)
    }

    pub fn add(&self, other: &LazyTensor) -> Result<LazyTensor> {
        self.binary(OpKind::Add, other, None)
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, other: &LazyTensor, alpha: impl Into<Scalar>) -> Result<LazyTensor> {
        self.binary(OpKind::Add, other, Some(alpha.into()))
    }

    pub fn sub(&self, other: &LazyTensor) -> Result<LazyTensor> {
        self.binary(OpKind::Sub, other, None)
    }

    pub fn mul(&self, other: &LazyTensor) -> Result<LazyTensor> {
        self.binary(OpKind::Mul, other, None)
    }

    pub fn div(&self, other: &LazyTensor) -> Result<LazyTensor> {
        self.binary(OpKind::Div, other, None)
    }

    pub fn maximum(&self, other: &LazyTensor) -> Result<LazyTensor> {
        self.binary(OpKind::Max, other, None)
    }

    pub fn add_scalar(&self, value: impl Into<Scalar>) -> Result<LazyTensor> {
        self.with_scalar(OpKind::Add, value.into())
    }

    pub fn sub_scalar(&self, value: impl Into<Scalar>) -> Result<LazyTensor> {
        self.with_scalar(OpKind::Sub, value.into())
    }

    pub fn mul_scalar(&self, value: impl Into<Scalar>) -> Result<LazyTensor> {
        self.with_scalar(OpKind::Mul, value.into())
    }

    pub fn div_scalar(&self, value: impl Into<Scalar>) -> Result<LazyTensor> {
        self.with_scalar(OpKind::Div, value.into())
    }

    pub fn max_scalar(&self, value: impl Into<Scalar>) -> Result<LazyTensor> {
        self.with_scalar(OpKind::Max, value.into())
    }

    pub fn matmul(&self, other: &LazyTensor) -> Result<LazyTensor> {
        let mut b = self.builder()?;
        let x = b.tensor(self)?;
        let y = b.tensor(other)?;
        let out = b.op(OpKind::MatMul, &[x, y], NodeAttrs::None)?;
        b.finish(out, None)
    }

    pub fn relu(&self) -> Result<LazyTensor> {
        self.unary(OpKind::Relu, NodeAttrs::None)
    }

    pub fn neg(&self) -> Result<LazyTensor> {
        self.unary(OpKind::Neg, NodeAttrs::None)
    }

    /// Sum over `dims`, which are removed from the shape.
    pub fn sum(&self, dims: &[usize]) -> Result<LazyTensor> {
        self.unary(OpKind::ReduceSum, NodeAttrs::ReduceSum { dims: dims.to_vec() })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<LazyTensor> {
        self.sum(&(0..self.shape().rank()).collect::<Vec<_>>())
    }

    /// Broadcasts a rank-0 tensor to `dims`.
    pub fn expand(&self, dims: &[usize]) -> Result<LazyTensor> {
        self.unary(OpKind::Expand, NodeAttrs::Expand { dims: dims.to_vec() })
    }

    fn make_view(&self, op: ViewOp) -> Result<LazyTensor> {
        op.apply(self.shape())?;
        let (base, mut ops) = match &self.0.view {
            Some(v) => (v.base.clone(), v.ops.clone()),
            None => (self.clone(), Vec::new()),
        };
        ops.push(op.clone());
        let generation = AtomicU64::new(base.mutation_count());
        let mut b = self.builder()?;
        let (value, index) = match self.0.rt.mode() {
            Mode::Lazy => {
                let x = b.tensor(self)?;
                let (kind, attrs) = op.lower();
                (b.op(kind, &[x], attrs)?, None)
            }
            Mode::Eager => {
                let index = eager_index(base.shape(), &ops)?;
                let base_value = eager_value(&base.0)?;
                let data = builder::gather(&*base_value.data()?, &index);
                let dims = index_shape(base.shape(), &ops)?;
                (Val::Buf(Buffer::from_host(data, &dims.dims, self.device())?), Some(index))
            }
        };
        b.finish(value, Some(ViewInfo { base, ops, generation, index }))
    }

    /// A view with new dims and the same element count.
    pub fn view(&self, dims: &[usize]) -> Result<LazyTensor> {
        self.make_view(ViewOp::Reshape { dims: dims.to_vec() })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<LazyTensor> {
        self.make_view(ViewOp::Permute { perm: perm.to_vec() })
    }

    pub fn narrow(&self, dim: usize, start: usize, length: usize) -> Result<LazyTensor> {
        self.make_view(ViewOp::Narrow { dim, start, length })
    }

    fn combine(b: &mut Builder<'_>, op: InPlaceOp, current: Val, rhs: Rhs<'_>, shape: &Shape) -> Result<Val> {
        let rhs = match rhs {
            Rhs::Tensor(t) => b.tensor(t)?,
            Rhs::Scalar(s) => b.splat(s, &shape.dims)?,
        };
        let kind = match op {
            InPlaceOp::Add => OpKind::Add,
            InPlaceOp::Sub => OpKind::Sub,
            InPlaceOp::Mul => OpKind::Mul,
            InPlaceOp::Assign => {
                let got = b.shape(&rhs);
                if &got != shape {
                    return Err(Error::ShapeMismatch { op: "assign", lhs: shape.clone(), rhs: got });
                }
                return Ok(rhs);
            }
        };
        b.op(kind, &[current, rhs], NodeAttrs::None)
    }

    /// Updates this tensor in place. The uid is unchanged; views of it (or,
    /// for a view, its base and sibling views) observe the new value.
    pub fn in_place<'r>(&self, op: InPlaceOp, rhs: impl Into<Rhs<'r>>) -> Result<&Self> {
        let rhs = rhs.into();
        if let Rhs::Tensor(t) = rhs {
            if t.device() != self.device() {
                return Err(Error::DeviceMismatch(self.device(), t.device()));
            }
        }
        match &self.0.view {
            None => {
                let mut b = self.builder()?;
                let current = b.tensor(self)?;
                let new = Self::combine(&mut b, op, current, rhs, self.shape())?;
                b.replace(&self.0, new);
            }
            Some(_) => self.view_update(op, rhs)?,
        }
        Ok(self)
    }

    /// Write through a view. Lazily, the view's value is rebuilt from the
    /// base, combined with `rhs`, and the result is mapped back onto the
    /// base through the inverse of each view op, all in the open graph.
    fn view_update(&self, op: InPlaceOp, rhs: Rhs<'_>) -> Result<()> {
        let info = self.0.view.as_ref().expect("view");
        let base = &info.base;
        let mut b = self.builder()?;
        if self.0.rt.mode() == Mode::Eager {
            let current = Val::Buf(eager_value(&self.0)?);
            let new = Self::combine(&mut b, op, current, rhs, self.shape())?;
            let Val::Buf(values) = new else { unreachable!("eager builder holds buffers") };
            drop(b);
            return eager_view_write(&self.0, &values);
        }
        let rhs_val = match rhs {
            Rhs::Tensor(t) => Some(b.tensor(t)?),
            Rhs::Scalar(_) => None,
        };
        let Val::Node(base_node) = b.tensor(base)? else { unreachable!("lazy builder holds nodes") };
        let g = b.graph().expect("lazy builder");
        let chain = g.view_chain(base_node, &info.ops)?;
        let current = Val::Node(*chain.last().expect("non-empty"));
        let updated = match rhs_val {
            Some(v) => Self::combine_val(&mut b, op, current, v, self.shape())?,
            None => Self::combine(&mut b, op, current, rhs, self.shape())?,
        };
        let Val::Node(u) = updated else { unreachable!("lazy builder holds nodes") };
        let g = b.graph().expect("lazy builder");
        let mut back = u;
        for (i, op) in info.ops.iter().enumerate().rev() {
            let prev = chain[i];
            back = match op {
                ViewOp::Reshape { .. } => {
                    let dims = g.graph.shape(prev).dims.clone();
                    g.record(OpKind::Reshape, &[back], NodeAttrs::Reshape { dims })?
                }
                ViewOp::Permute { perm } => {
                    let mut inv = vec![0; perm.len()];
                    perm.iter().enumerate().for_each(|(i, &p)| inv[p] = i);
                    g.record(OpKind::Permute, &[back], NodeAttrs::Permute { perm: inv })?
                }
                ViewOp::Narrow { dim, start, .. } => {
                    g.record(OpKind::UpdateNarrow, &[prev, back], NodeAttrs::UpdateNarrow { dim: *dim, start: *start })?
                }
            };
        }
        b.replace(&base.0, Val::Node(back));
        *self.0.state.lock() = State::Pending(u);
        info.sync_generation();
        Ok(())
    }

    fn combine_val(b: &mut Builder<'_>, op: InPlaceOp, current: Val, rhs: Val, shape: &Shape) -> Result<Val> {
        let kind = match op {
            InPlaceOp::Add => OpKind::Add,
            InPlaceOp::Sub => OpKind::Sub,
            InPlaceOp::Mul => OpKind::Mul,
            InPlaceOp::Assign => {
                let got = b.shape(&rhs);
                if &got != shape {
                    return Err(Error::ShapeMismatch { op: "assign", lhs: shape.clone(), rhs: got });
                }
                return Ok(rhs);
            }
        };
        b.op(kind, &[current, rhs], NodeAttrs::None)
    }

    pub fn add_<'r>(&self, rhs: impl Into<Rhs<'r>>) -> Result<&Self> {
        self.in_place(InPlaceOp::Add, rhs)
    }

    pub fn sub_<'r>(&self, rhs: impl Into<Rhs<'r>>) -> Result<&Self> {
        self.in_place(InPlaceOp::Sub, rhs)
    }

    pub fn mul_<'r>(&self, rhs: impl Into<Rhs<'r>>) -> Result<&Self> {
        self.in_place(InPlaceOp::Mul, rhs)
    }

    pub fn assign_<'r>(&self, rhs: impl Into<Rhs<'r>>) -> Result<&Self> {
        self.in_place(InPlaceOp::Assign, rhs)
    }

    /// The materialized buffer, running a full barrier first if this tensor
    /// has pending work.
    fn materialize(&self) -> Result<Buffer> {
        let rt = &self.0.rt;
        if rt.mode() == Mode::Eager {
            return eager_value(&self.0);
        }
        if self.is_pending() || self.0.is_stale_view() {
            rt.mark_step(self.device(), true)?;
        }
        self.0.slot().expect("materialized after the barrier").wait()
    }

    /// Copies the values to the host. Pending work forces a blocking barrier
    /// on this tensor's device.
    pub fn to_host(&self) -> Result<HostData> {
        self.materialize()?.read_to_host()
    }

    /// The single value of a rank-0 tensor.
    pub fn item(&self) -> Result<Scalar> {
        if self.shape().rank() != 0 {
            return Err(Error::RankError(self.shape().clone()));
        }
        Ok(self.to_host()?.get(0))
    }

    /// Id of the buffer backing this tensor, after materializing it.
    pub fn buffer_id(&self) -> Result<BufferId> {
        Ok(self.materialize()?.id())
    }

    /// Human-readable rendering of the values, nested by dimension.
    pub fn to_text(&self) -> Result<String> {
        let data = self.to_host()?;
        let mut out = format!("tensor({}, ", self.shape());
        render(&mut out, &data, self.dims(), 0, &mut 0);
        out.push(')');
        Ok(out)
    }

    /// Runs an op the compiler cannot lower: materializes this tensor alone,
    /// runs the eager kernel, and returns a materialized result that enters
    /// later graphs as a leaf.
    pub fn fallback(&self, op: EagerOnlyOp) -> Result<LazyTensor> {
        let rt = &self.0.rt;
        let input = match rt.mode() {
            Mode::Eager => eager_value(&self.0)?,
            Mode::Lazy => {
                rt.sync_tensor(self)?;
                self.0.slot().expect("synced").wait()?
            }
        };
        let out = rt.0.registry.dispatch_eager_only(self.device(), op, &input)?;
        Metrics::bump(&rt.ctx(self.device())?.metrics.eager_fallback_dispatches, 1);
        LazyTensor::create(rt, self.device(), out.shape().clone(), State::Data(Slot::ready(out)), None)
    }

    /// Stable ascending argsort along `dim` (eager-only).
    pub fn argsort(&self, dim: usize) -> Result<LazyTensor> {
        self.fallback(EagerOnlyOp::Argsort { dim })
    }

    /// Count of non-zero elements (eager-only).
    pub fn nonzero_count(&self) -> Result<LazyTensor> {
        self.fallback(EagerOnlyOp::NonzeroCount)
    }
}

fn index_shape(base: &Shape, ops: &[ViewOp]) -> Result<Shape> {
    ops.iter().try_fold(base.clone(), |s, op| op.apply(&s))
}

fn render(out: &mut String, data: &HostData, dims: &[usize], depth: usize, at: &mut usize) {
    if depth == dims.len() {
        let _ = write!(out, "{}", data.get(*at));
        *at += 1;
        return;
    }
    out.push('[');
    for i in 0..dims[depth] {
        if i > 0 {
            out.push_str(", ");
        }
        render(out, data, dims, depth + 1, at);
    }
    out.push(']');
}

impl std::fmt::Debug for LazyTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let state = if self.is_pending() { "pending" } else { "materialized" };
        write!(f, "LazyTensor(uid={}, {} on {}, {state})", self.uid(), self.shape(), self.device())
    }
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl ops::$trait<&LazyTensor> for &LazyTensor {
            type Output = Result<LazyTensor>;

            fn $method(self, rhs: &LazyTensor) -> Result<LazyTensor> {
                self.binary($kind, rhs, None)
            }
        }
    };
}

binary_operator!(Add, add, OpKind::Add);
binary_operator!(Sub, sub, OpKind::Sub);
binary_operator!(Mul, mul, OpKind::Mul);
binary_operator!(Div, div, OpKind::Div);

impl ops::Neg for &LazyTensor {
    type Output = Result<LazyTensor>;

    fn neg(self) -> Result<LazyTensor> {
        LazyTensor::neg(self)
    }
}
