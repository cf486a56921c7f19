//! Graph-to-graph optimization passes. Each pass takes a graph and its root
//! list and returns a rebuilt graph plus the remapped roots. Rebuilding walks
//! nodes in id order, so the output keeps the input's topological order.

use std::collections::HashMap;

use crate::eager::kernels::fold_scalars;
use crate::error::{Error, Result};
use crate::ir::{IrGraph, IrNode, NodeAttrs, NodeId, OpKind, Scalar};

/// Knobs for the simplifier. `unguarded_add_identity` deliberately breaks the
/// `x + 0` rewrite (it drops any constant addend); it exists so the
/// differential fuzzer can demonstrate that it catches miscompiles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct SimplifyOptions {
    pub unguarded_add_identity: bool,
}

fn copy_node(out: &mut IrGraph, node: &IrNode, operands: &[NodeId]) -> Result<NodeId> {
    if node.kind == OpKind::DeviceData {
        out.leaf(node.shape.clone(), node.attrs.clone())
    } else {
        out.record_node(node.kind, operands, node.attrs.clone())
    }
}

/// Removes nodes unreachable from `roots`.
pub fn dce(graph: &IrGraph, roots: &[NodeId]) -> Result<(IrGraph, Vec<NodeId>)> {
    if roots.is_empty() {
        return Err(Error::EmptyRoots);
    }
    let mut live = vec![false; graph.len()];
    let mut stack: Vec<NodeId> = roots.to_vec();
    while let Some(id) = stack.pop() {
        if std::mem::replace(&mut live[graph.get(id)?.id.0], true) {
            continue;
        }
        stack.extend(graph.node(id).operands.iter().copied());
    }
    let mut out = IrGraph::new(graph.device());
    let mut map = vec![NodeId(usize::MAX); graph.len()];
    for node in graph.nodes().iter().filter(|n| live[n.id.0]) {
        let operands: Vec<NodeId> = node.operands.iter().map(|o| map[o.0]).collect();
        map[node.id.0] = copy_node(&mut out, node, &operands)?;
    }
    Ok((out, roots.iter().map(|r| map[r.0]).collect()))
}

/// Merges structurally identical nodes. Parameters are never merged, even
/// when two dynamic scalars happen to carry equal values.
pub fn cse(graph: &IrGraph, roots: &[NodeId]) -> Result<(IrGraph, Vec<NodeId>)> {
    let mut out = IrGraph::new(graph.device());
    let mut map = Vec::with_capacity(graph.len());
    let mut seen: HashMap<(OpKind, NodeAttrs, Vec<NodeId>), NodeId> = HashMap::new();
    for node in graph.nodes() {
        let operands: Vec<NodeId> = node.operands.iter().map(|o| map[o.0]).collect();
        let id = if node.kind == OpKind::DeviceData {
            copy_node(&mut out, node, &operands)?
        } else {
            let key = (node.kind, node.attrs.clone(), operands);
            match seen.get(&key) {
                Some(&id) => id,
                None => {
                    let id = copy_node(&mut out, node, &key.2)?;
                    seen.insert(key, id);
                    id
                }
            }
        };
        map.push(id);
    }
    Ok((out, roots.iter().map(|r| map[r.0]).collect()))
}

/// The value of a node that is a constant, or a constant broadcast by
/// `Expand`.
fn splat_value(g: &IrGraph, id: NodeId) -> Option<Scalar> {
    let node = g.node(id);
    match node.kind {
        OpKind::Constant => node.constant_value(),
        OpKind::Expand => g.node(node.operands[0]).constant_value(),
        _ => None,
    }
}

struct Rewriter<'a> {
    out: IrGraph,
    opts: &'a SimplifyOptions,
    changed: bool,
}

impl Rewriter<'_> {
    /// A constant of the given shape: the scalar itself at rank 0, an
    /// expanded scalar otherwise.
    fn splat(&mut self, value: Scalar, dims: &[usize]) -> Result<NodeId> {
        let c = self.out.record_node(OpKind::Constant, &[], NodeAttrs::Constant { value })?;
        if dims.is_empty() {
            Ok(c)
        } else {
            self.out.record_node(OpKind::Expand, &[c], NodeAttrs::Expand { dims: dims.to_vec() })
        }
    }

    fn rewrite(&mut self, node: &IrNode, ops: &[NodeId]) -> Result<Option<NodeId>> {
        let g = &self.out;
        let dims = &node.shape.dims;
        let splats: Vec<Option<Scalar>> = ops.iter().map(|o| splat_value(g, *o)).collect();
        match node.kind {
            OpKind::Mul => {
                if splats[1].is_some_and(Scalar::is_one) {
                    return Ok(Some(ops[0]));
                }
                if splats[0].is_some_and(Scalar::is_one) {
                    return Ok(Some(ops[1]));
                }
                // The zero operand already has the product's shape.
                if let Some(i) = splats.iter().position(|s| s.is_some_and(Scalar::is_zero)) {
                    return Ok(Some(ops[i]));
                }
            }
            OpKind::Add => {
                if self.opts.unguarded_add_identity && splats[1].is_some() {
                    return Ok(Some(ops[0]));
                }
                if splats[1].is_some_and(Scalar::is_zero) {
                    return Ok(Some(ops[0]));
                }
                if splats[0].is_some_and(Scalar::is_zero) {
                    return Ok(Some(ops[1]));
                }
            }
            OpKind::Neg => {
                let inner = g.node(ops[0]);
                if inner.kind == OpKind::Neg {
                    return Ok(Some(inner.operands[0]));
                }
            }
            OpKind::Expand if g.shape(ops[0]) == &node.shape => return Ok(Some(ops[0])),
            _ => {}
        }
        if (node.kind.is_binary_elementwise() || node.kind.is_unary_elementwise()) && splats.iter().all(Option::is_some) {
            let values: Vec<Scalar> = splats.into_iter().flatten().collect();
            // Integer division by zero stays in the graph and fails at run time.
            if let Some(Ok(folded)) = fold_scalars(node.kind, &values) {
                return self.splat(folded, dims).map(Some);
            }
        }
        Ok(None)
    }
}

fn simplify_once(graph: &IrGraph, roots: &[NodeId], opts: &SimplifyOptions) -> Result<(IrGraph, Vec<NodeId>, bool)> {
    let mut rw = Rewriter { out: IrGraph::new(graph.device()), opts, changed: false };
    let mut map = Vec::with_capacity(graph.len());
    for node in graph.nodes() {
        let operands: Vec<NodeId> = node.operands.iter().map(|o| map[o.0]).collect();
        let id = match rw.rewrite(node, &operands)? {
            Some(id) => {
                rw.changed = true;
                id
            }
            None => copy_node(&mut rw.out, node, &operands)?,
        };
        map.push(id);
    }
    let roots: Vec<NodeId> = roots.iter().map(|r| map[r.0]).collect();
    Ok((rw.out, roots, rw.changed))
}

/// Algebraic simplification to a fixpoint, followed by removal of the nodes
/// the rewrites orphaned:
///
/// * `x * 1`, `1 * x` -> `x` and `x * 0` -> `0` (also with expanded constants)
/// * `x + 0`, `0 + x` -> `x`
/// * `-(-x)` -> `x`; an `Expand` to the operand's own shape -> operand
/// * elementwise ops over constants are folded
pub fn simplify(graph: &IrGraph, roots: &[NodeId], opts: &SimplifyOptions) -> Result<(IrGraph, Vec<NodeId>)> {
    let (mut g, mut r) = dce(graph, roots)?;
    loop {
        let (next, next_roots, changed) = simplify_once(&g, &r, opts)?;
        let (next, next_roots) = dce(&next, &next_roots)?;
        // Folding a shared constant subtree can add nodes; such a round is
        // dropped so the pass never grows the graph.
        if !changed || next.len() > g.len() {
            return Ok(if next.len() > g.len() { (g, r) } else { (next, next_roots) });
        }
        g = next;
        r = next_roots;
    }
}
