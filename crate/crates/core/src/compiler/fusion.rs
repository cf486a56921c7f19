//! Grouping of elementwise nodes into fused kernels and ordering of the
//! resulting steps.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use crate::ir::{DType, IrGraph, NodeAttrs, NodeId, OpKind, Scalar, Shape};

/// One instruction of a fused elementwise kernel. Operands are indices of
/// earlier instructions.
#[derive(Debug, Clone, PartialEq)]
pub enum FusedOp {
    /// Reads step input `index`; a broadcast input has one element.
    Input {
        index: usize,
        broadcast: bool,
    },
    Const(Scalar),
    Unary(OpKind, usize),
    Binary(OpKind, usize, usize),
}

/// A straight-line elementwise program evaluated once per output element.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedKernel {
    pub shape: Shape,
    pub ops: Vec<FusedOp>,
    /// Instruction index of each step output, parallel to `PlanStep::outputs`.
    pub outputs: Vec<usize>,
    /// Number of graph nodes folded into this kernel.
    pub node_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Fused(FusedKernel),
    /// One non-fusible node, run with its eager kernel.
    Single {
        kind: OpKind,
        attrs: NodeAttrs,
        input_shapes: Vec<Shape>,
        out: Shape,
    },
}

/// One kernel launch. Values are named by node ids of the optimized graph
/// until memory planning assigns them locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub kind: StepKind,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
}

impl PlanStep {
    pub fn is_fused(&self) -> bool {
        matches!(self.kind, StepKind::Fused(_))
    }
}

fn fusible(graph: &IrGraph, id: NodeId) -> bool {
    let node = graph.node(id);
    node.shape.dtype != DType::Pred
        && (node.kind.is_binary_elementwise() || node.kind.is_unary_elementwise() || node.kind == OpKind::Expand)
}

struct Groups {
    parent: Vec<usize>,
    fused: Vec<bool>,
    shape: Vec<Shape>,
    /// Groups this group reads from directly. Entries may be stale ids of
    /// merged groups; always resolve them through `find`.
    deps: Vec<BTreeSet<usize>>,
}

impl Groups {
    fn find(&mut self, mut g: usize) -> usize {
        while self.parent[g] != g {
            self.parent[g] = self.parent[self.parent[g]];
            g = self.parent[g];
        }
        g
    }

    fn create(&mut self, fused: bool, shape: Shape, deps: BTreeSet<usize>) -> usize {
        let g = self.parent.len();
        self.parent.push(g);
        self.fused.push(fused);
        self.shape.push(shape);
        self.deps.push(deps);
        g
    }

    /// Whether `target` is reachable from `from` along dependency edges.
    fn reaches(&mut self, from: usize, target: usize) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(g) = stack.pop() {
            let g = self.find(g);
            if !seen.insert(g) {
                continue;
            }
            if g == target && g != from {
                return true;
            }
            let deps: Vec<usize> = self.deps[g].iter().copied().collect();
            stack.extend(deps);
        }
        false
    }

    fn merge_into(&mut self, root: usize, other: usize) {
        self.parent[other] = root;
        let deps = std::mem::take(&mut self.deps[other]);
        self.deps[root].extend(deps);
    }
}

/// Partitions the graph into steps. Adjacent elementwise nodes of one shape
/// share a fused kernel as long as merging cannot create a cycle between
/// steps; constants are inlined into the kernels that read them.
pub fn fuse_elementwise(graph: &IrGraph, roots: &[NodeId]) -> Vec<PlanStep> {
    let n = graph.len();
    let mut users: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for node in graph.nodes() {
        for op in &node.operands {
            users[op.0].push(node.id);
        }
    }
    let is_root: Vec<bool> = {
        let mut r = vec![false; n];
        roots.iter().for_each(|id| r[id.0] = true);
        r
    };
    let is_const = |id: NodeId| graph.node(id).kind == OpKind::Constant;

    let mut groups = Groups { parent: Vec::new(), fused: Vec::new(), shape: Vec::new(), deps: Vec::new() };
    let mut group_of: Vec<Option<usize>> = vec![None; n];
    for node in graph.nodes() {
        let id = node.id;
        match node.kind {
            OpKind::DeviceData => continue,
            OpKind::Constant => {
                // Only materialized when something outside a fused kernel reads it.
                let needed = is_root[id.0] || users[id.0].iter().any(|u| !fusible(graph, *u));
                if needed {
                    group_of[id.0] = Some(groups.create(false, node.shape.clone(), BTreeSet::new()));
                }
                continue;
            }
            _ => {}
        }
        let fuse = fusible(graph, id);
        let mut operand_groups: Vec<usize> = Vec::new();
        for &op in &node.operands {
            if fuse && is_const(op) {
                continue;
            }
            if let Some(g) = group_of[op.0] {
                let g = groups.find(g);
                if !operand_groups.contains(&g) {
                    operand_groups.push(g);
                }
            }
        }
        if !fuse {
            group_of[id.0] = Some(groups.create(false, node.shape.clone(), operand_groups.into_iter().collect()));
            continue;
        }
        let candidates: Vec<usize> =
            operand_groups.iter().copied().filter(|&g| groups.fused[g] && groups.shape[g] == node.shape).collect();
        let mut safe = Vec::new();
        for &c in &candidates {
            let blocked = operand_groups.iter().any(|&h| h != c && groups.reaches(h, c));
            if !blocked {
                safe.push(c);
            }
        }
        let g = match safe.first() {
            Some(&g) => {
                for &other in &safe[1..] {
                    groups.merge_into(g, other);
                }
                let extra: Vec<usize> = operand_groups.iter().copied().filter(|h| !safe.contains(h)).collect();
                groups.deps[g].extend(extra);
                g
            }
            None => groups.create(true, node.shape.clone(), operand_groups.into_iter().collect()),
        };
        group_of[id.0] = Some(g);
    }

    // Collect members per final group.
    let mut members: HashMap<usize, Vec<NodeId>> = HashMap::new();
    for node in graph.nodes() {
        if let Some(g) = group_of[node.id.0] {
            let g = groups.find(g);
            group_of[node.id.0] = Some(g);
            members.entry(g).or_default().push(node.id);
        }
    }

    // Topological order of groups, earliest first member first.
    let mut deps: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    for &g in members.keys() {
        let raw: Vec<usize> = groups.deps[g].iter().copied().collect();
        let resolved: BTreeSet<usize> = raw.into_iter().map(|d| groups.find(d)).filter(|&d| d != g).collect();
        deps.insert(g, resolved);
    }
    let mut dependents: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut pending: HashMap<usize, usize> = HashMap::new();
    for (&g, ds) in &deps {
        pending.insert(g, ds.len());
        for &d in ds {
            dependents.entry(d).or_default().push(g);
        }
    }
    let mut ready: BinaryHeap<Reverse<(NodeId, usize)>> =
        pending.iter().filter(|(_, &c)| c == 0).map(|(&g, _)| Reverse((members[&g][0], g))).collect();
    let mut steps = Vec::with_capacity(members.len());
    while let Some(Reverse((_, g))) = ready.pop() {
        steps.push(build_step(graph, &members[&g], &group_of, g, &users, &is_root));
        for &d in dependents.get(&g).map(Vec::as_slice).unwrap_or(&[]) {
            let c = pending.get_mut(&d).expect("dependent group");
            *c -= 1;
            if *c == 0 {
                ready.push(Reverse((members[&d][0], d)));
            }
        }
    }
    debug_assert_eq!(steps.len(), members.len(), "step dependencies must be acyclic");
    steps
}

/// One step per computed node, in graph order. Used to check fusion against
/// node-at-a-time execution.
pub fn unfused_steps(graph: &IrGraph) -> Vec<PlanStep> {
    graph
        .nodes()
        .iter()
        .filter(|n| n.kind != OpKind::DeviceData)
        .map(|n| PlanStep {
            kind: StepKind::Single {
                kind: n.kind,
                attrs: n.attrs.clone(),
                input_shapes: n.operands.iter().map(|o| graph.shape(*o).clone()).collect(),
                out: n.shape.clone(),
            },
            inputs: n.operands.clone(),
            outputs: vec![n.id],
        })
        .collect()
}

fn build_step(
    graph: &IrGraph,
    members: &[NodeId],
    group_of: &[Option<usize>],
    g: usize,
    users: &[Vec<NodeId>],
    is_root: &[bool],
) -> PlanStep {
    let first = graph.node(members[0]);
    if members.len() == 1 && !fusible(graph, first.id) {
        return PlanStep {
            kind: StepKind::Single {
                kind: first.kind,
                attrs: first.attrs.clone(),
                input_shapes: first.operands.iter().map(|o| graph.shape(*o).clone()).collect(),
                out: first.shape.clone(),
            },
            inputs: first.operands.clone(),
            outputs: vec![first.id],
        };
    }

    let shape = first.shape.clone();
    let mut ops: Vec<FusedOp> = Vec::new();
    let mut inputs: Vec<NodeId> = Vec::new();
    let mut value_of: HashMap<NodeId, usize> = HashMap::new();
    let mut resolve = |ops: &mut Vec<FusedOp>, value_of: &mut HashMap<NodeId, usize>, o: NodeId| -> usize {
        if let Some(&i) = value_of.get(&o) {
            return i;
        }
        let node = graph.node(o);
        let op = match node.constant_value() {
            Some(v) => FusedOp::Const(v),
            None => {
                inputs.push(o);
                FusedOp::Input { index: inputs.len() - 1, broadcast: node.shape.rank() == 0 && shape.rank() != 0 }
            }
        };
        ops.push(op);
        value_of.insert(o, ops.len() - 1);
        ops.len() - 1
    };
    for &m in members {
        let node = graph.node(m);
        let args: Vec<usize> = node.operands.iter().map(|&o| resolve(&mut ops, &mut value_of, o)).collect();
        let idx = match node.kind {
            OpKind::Expand => args[0],
            k if k.is_unary_elementwise() => {
                ops.push(FusedOp::Unary(k, args[0]));
                ops.len() - 1
            }
            k => {
                ops.push(FusedOp::Binary(k, args[0], args[1]));
                ops.len() - 1
            }
        };
        value_of.insert(m, idx);
    }
    let mut outputs = Vec::new();
    let mut out_ops = Vec::new();
    for &m in members {
        let escapes = is_root[m.0] || users[m.0].iter().any(|u| group_of[u.0] != Some(g));
        if escapes {
            outputs.push(m);
            out_ops.push(value_of[&m]);
        }
    }
    PlanStep { kind: StepKind::Fused(FusedKernel { shape, ops, outputs: out_ops, node_count: members.len() }), inputs, outputs }
}
