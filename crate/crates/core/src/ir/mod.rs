//! The IR data model: shapes, op kinds, nodes, and the append-only graph that
//! tensor operations record into.
//!
//! A graph is a DAG by construction: operands always refer to nodes that were
//! recorded earlier, so node ids double as a topological order. Leaves are
//! either `device_data` (a bound buffer or a dynamic scalar parameter) or an
//! embedded `constant`.

mod canon;
mod dump;
mod shape_infer;

use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

pub use canon::{canonicalize, CacheKey, CanonicalForm, ParamDesc};
pub use dump::dump_text;
pub use shape_infer::infer_shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    I64,
    Pred,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I64 => "s64",
            DType::Pred => "pred",
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
            DType::Pred => 1,
        }
    }

    pub fn is_numeric(self) -> bool {
        !matches!(self, DType::Pred)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Device identifier. Only CPU devices exist in this runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Device(pub u32);

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CPU:{}", self.0)
    }
}

/// A static shape: element type plus dimensions. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    pub dtype: DType,
    pub dims: Vec<usize>,
}

impl Shape {
    pub fn new(dtype: DType, dims: impl Into<Vec<usize>>) -> Self {
        Shape { dtype, dims: dims.into() }
    }

    pub fn scalar(dtype: DType) -> Self {
        Shape { dtype, dims: Vec::new() }
    }

    pub fn f32(dims: impl Into<Vec<usize>>) -> Self {
        Shape::new(DType::F32, dims)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn with_dims(&self, dims: impl Into<Vec<usize>>) -> Shape {
        Shape::new(self.dtype, dims)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.dtype)?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

/// A host scalar. Equality and hashing are bitwise for floats so that `-0.0`
/// and `0.0` are distinct values.
#[derive(Debug, Clone, Copy)]
pub enum Scalar {
    F32(f32),
    I64(i64),
    Pred(bool),
}

impl Scalar {
    pub fn dtype(self) -> DType {
        match self {
            Scalar::F32(_) => DType::F32,
            Scalar::I64(_) => DType::I64,
            Scalar::Pred(_) => DType::Pred,
        }
    }

    /// Exact test for the embedded special values `+0` and `1`.
    pub fn is_special(self) -> bool {
        match self {
            Scalar::F32(v) => v.to_bits() == 0.0f32.to_bits() || v.to_bits() == 1.0f32.to_bits(),
            Scalar::I64(v) => v == 0 || v == 1,
            Scalar::Pred(_) => true,
        }
    }

    pub fn is_zero(self) -> bool {
        match self {
            Scalar::F32(v) => v.to_bits() == 0,
            Scalar::I64(v) => v == 0,
            Scalar::Pred(v) => !v,
        }
    }

    pub fn is_one(self) -> bool {
        match self {
            Scalar::F32(v) => v.to_bits() == 1.0f32.to_bits(),
            Scalar::I64(v) => v == 1,
            Scalar::Pred(v) => v,
        }
    }

    pub fn zero(dtype: DType) -> Scalar {
        match dtype {
            DType::F32 => Scalar::F32(0.0),
            DType::I64 => Scalar::I64(0),
            DType::Pred => Scalar::Pred(false),
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::F32(v) => v as f64,
            Scalar::I64(v) => v as f64,
            Scalar::Pred(v) => v as u8 as f64,
        }
    }

    fn bits(self) -> u64 {
        match self {
            Scalar::F32(v) => v.to_bits() as u64,
            Scalar::I64(v) => v as u64,
            Scalar::Pred(v) => v as u64,
        }
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        self.dtype() == other.dtype() && self.bits() == other.bits()
    }
}

impl Eq for Scalar {}

impl Hash for Scalar {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.dtype().hash(state);
        self.bits().hash(state);
    }
}

impl From<f32> for Scalar {
    fn from(v: f32) -> Self {
        Scalar::F32(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::I64(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Pred(v)
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::F32(v) => write!(f, "{v}"),
            Scalar::I64(v) => write!(f, "{v}"),
            Scalar::Pred(v) => write!(f, "{}", *v as u8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    DeviceData,
    Constant,
    Expand,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Relu,
    Max,
    MatMul,
    ReduceSum,
    Reshape,
    Permute,
    Narrow,
    UpdateNarrow,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::DeviceData,
        OpKind::Constant,
        OpKind::Expand,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Relu,
        OpKind::Max,
        OpKind::MatMul,
        OpKind::ReduceSum,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Narrow,
        OpKind::UpdateNarrow,
    ];

    /// Name used in the textual IR.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::DeviceData => "device_data",
            OpKind::Constant => "constant",
            OpKind::Expand => "expand",
            OpKind::Add => "add",
            OpKind::Sub => "subtract",
            OpKind::Mul => "multiply",
            OpKind::Div => "divide",
            OpKind::Neg => "negate",
            OpKind::Relu => "relu",
            OpKind::Max => "maximum",
            OpKind::MatMul => "dot",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Narrow => "narrow",
            OpKind::UpdateNarrow => "update_narrow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_binary_elementwise(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Max)
    }

    pub fn is_unary_elementwise(self) -> bool {
        matches!(self, OpKind::Neg | OpKind::Relu)
    }

    pub fn is_view(self) -> bool {
        matches!(self, OpKind::Reshape | OpKind::Permute | OpKind::Narrow)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-kind attributes. Kinds without attributes use `None`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum NodeAttrs {
    None,
    DeviceData {
        device: Device,
        /// Parameter position, assigned by canonicalization.
        param_slot: Option<usize>,
        /// A rank-0 leaf standing in for a non-special host scalar.
        dynamic_scalar: bool,
    },
    Constant {
        value: Scalar,
    },
    Expand {
        dims: Vec<usize>,
    },
    Reshape {
        dims: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
    Narrow {
        dim: usize,
        start: usize,
        length: usize,
    },
    UpdateNarrow {
        dim: usize,
        start: usize,
    },
    ReduceSum {
        dims: Vec<usize>,
    },
}

impl NodeAttrs {
    pub fn device_data(device: Device) -> Self {
        NodeAttrs::DeviceData { device, param_slot: None, dynamic_scalar: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub operands: Vec<NodeId>,
    pub shape: Shape,
    pub attrs: NodeAttrs,
}

impl IrNode {
    pub fn is_leaf(&self) -> bool {
        self.operands.is_empty()
    }

    pub fn is_dynamic_scalar(&self) -> bool {
        matches!(self.attrs, NodeAttrs::DeviceData { dynamic_scalar: true, .. })
    }

    pub fn constant_value(&self) -> Option<Scalar> {
        match self.attrs {
            NodeAttrs::Constant { value } => Some(value),
            _ => None,
        }
    }
}

/// Append-only DAG of IR nodes bound to one device.
#[derive(Debug, Clone)]
pub struct IrGraph {
    device: Device,
    nodes: Vec<IrNode>,
}

impl IrGraph {
    pub fn new(device: Device) -> Self {
        IrGraph { device, nodes: Vec::new() }
    }

    pub fn device(&self) -> Device {
        self.device
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[IrNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &IrNode {
        &self.nodes[id.0]
    }

    pub fn get(&self, id: NodeId) -> Result<&IrNode> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    /// Records a computed node, inferring its shape from the operands.
    pub fn record_node(&mut self, kind: OpKind, operands: &[NodeId], attrs: NodeAttrs) -> Result<NodeId> {
        if kind == OpKind::DeviceData {
            return Err(Error::InvalidAttrs { op: kind.name(), reason: "leaves are recorded with `device_data`".into() });
        }
        let mut shapes = Vec::with_capacity(operands.len());
        for &op in operands {
            shapes.push(self.get(op)?.shape.clone());
        }
        let shape = infer_shape(kind, &shapes, &attrs)?;
        Ok(self.push(kind, operands.to_vec(), shape, attrs))
    }

    /// Records a `device_data` leaf holding an input buffer of `shape`.
    pub fn device_data(&mut self, shape: Shape) -> NodeId {
        let attrs = NodeAttrs::device_data(self.device);
        self.push(OpKind::DeviceData, Vec::new(), shape, attrs)
    }

    /// Records a leaf with explicit attributes; used when rebuilding graphs.
    pub fn leaf(&mut self, shape: Shape, attrs: NodeAttrs) -> Result<NodeId> {
        match attrs {
            NodeAttrs::DeviceData { device, .. } if device != self.device => Err(Error::DeviceMismatch(self.device, device)),
            NodeAttrs::DeviceData { .. } => Ok(self.push(OpKind::DeviceData, Vec::new(), shape, attrs)),
            other => self.record_node(OpKind::Constant, &[], other),
        }
    }

    /// Wraps a host scalar. `0` and `1` are embedded as constants; every other
    /// value becomes a rank-0 dynamic parameter whose runtime value is
    /// returned alongside the node.
    pub fn wrap_scalar(&mut self, value: Scalar) -> (NodeId, Option<Scalar>) {
        if value.is_special() {
            let id = self.push(OpKind::Constant, Vec::new(), Shape::scalar(value.dtype()), NodeAttrs::Constant { value });
            (id, None)
        } else {
            let attrs = NodeAttrs::DeviceData { device: self.device, param_slot: None, dynamic_scalar: true };
            let id = self.push(OpKind::DeviceData, Vec::new(), Shape::scalar(value.dtype()), attrs);
            (id, Some(value))
        }
    }

    /// Replaces a node's computation with a `device_data` leaf of the same
    /// shape. Later nodes keep referring to the same id, now a leaf.
    pub fn substitute_leaf(&mut self, id: NodeId) {
        let node = &mut self.nodes[id.0];
        node.kind = OpKind::DeviceData;
        node.operands.clear();
        node.attrs = NodeAttrs::device_data(self.device);
    }

    fn push(&mut self, kind: OpKind, operands: Vec<NodeId>, shape: Shape, attrs: NodeAttrs) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(IrNode { id, kind, operands, shape, attrs });
        id
    }
}
