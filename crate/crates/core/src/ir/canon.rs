//! Canonical form of a rooted graph, used as the compile-cache key.
//!
//! The canonical traversal is a post-order from the roots in which each
//! node's operands are visited tallest-subtree first (operand height is the
//! longest path down to a leaf), with ties visiting the later operand first.
//! Visiting the deeper operand first is the Sethi-Ullman evaluation order and
//! keeps the live set of the resulting schedule small. Creation ids never
//! influence the result; only structure does.

use std::cmp::Reverse;
use std::fmt;
use std::hash::Hash;

use siphasher::sip128::{Hasher128, SipHasher13};

use super::{Device, IrGraph, NodeAttrs, NodeId, OpKind, Shape};
use crate::error::{Error, Result};

/// Digest of a canonical graph with dynamic scalar values abstracted away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub digest: u128,
    pub param_arity: usize,
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}/{}", self.digest, self.param_arity)
    }
}

/// One program parameter, in binding order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDesc {
    /// The leaf in the graph that was canonicalized.
    pub source: NodeId,
    /// The same leaf in the canonical graph.
    pub canonical: NodeId,
    pub shape: Shape,
    pub dynamic_scalar: bool,
}

#[derive(Debug, Clone)]
pub struct CanonicalForm {
    pub key: CacheKey,
    /// Parameters in first-visit order; this is the argument-binding order of
    /// any program compiled from `graph`.
    pub params: Vec<ParamDesc>,
    /// Reachable nodes renumbered densely in canonical order, with
    /// `param_slot` filled in on every `device_data` leaf.
    pub graph: IrGraph,
    pub roots: Vec<NodeId>,
    /// `order[i]` is the source node of canonical node `i`.
    pub order: Vec<NodeId>,
}

/// Post-order of the nodes reachable from `roots`, in canonical order.
pub(crate) fn canonical_order(graph: &IrGraph, roots: &[NodeId]) -> Result<Vec<NodeId>> {
    if roots.is_empty() {
        return Err(Error::EmptyRoots);
    }
    for r in roots {
        graph.get(*r)?;
    }
    let limit = roots.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let nodes = &graph.nodes()[..limit];
    let mut height = vec![0usize; limit];
    for n in nodes {
        height[n.id.0] = n.operands.iter().map(|o| height[o.0] + 1).max().unwrap_or(0);
    }

    let mut visited = vec![false; limit];
    let mut order = Vec::new();
    // (node, expanded) pairs; a node is emitted when popped the second time.
    let mut stack: Vec<(NodeId, bool)> = Vec::new();
    for &root in roots {
        if visited[root.0] {
            continue;
        }
        stack.push((root, false));
        while let Some((id, expanded)) = stack.pop() {
            if visited[id.0] {
                continue;
            }
            if expanded {
                visited[id.0] = true;
                order.push(id);
                continue;
            }
            stack.push((id, true));
            let node = graph.node(id);
            let mut ops: Vec<(usize, NodeId)> = node.operands.iter().copied().enumerate().collect();
            // Visit order: tallest first, later position first on ties. The
            // stack pops in reverse, so push in the opposite order.
            ops.sort_by_key(|&(pos, op)| (Reverse(height[op.0]), Reverse(pos)));
            for (_, op) in ops.into_iter().rev() {
                if !visited[op.0] {
                    stack.push((op, false));
                }
            }
        }
    }
    Ok(order)
}

/// Canonicalizes the subgraph reachable from `roots`.
pub fn canonicalize(graph: &IrGraph, roots: &[NodeId]) -> Result<CanonicalForm> {
    let order = canonical_order(graph, roots)?;
    let mut index = vec![usize::MAX; order.iter().map(|n| n.0).max().unwrap_or(0) + 1];
    for (i, id) in order.iter().enumerate() {
        index[id.0] = i;
    }

    let mut hasher = SipHasher13::new_with_keys(0x6c61_7a79_7465_6e73, 0x6f72_2d63_616e_6f6e);
    graph.device().hash(&mut hasher);
    order.len().hash(&mut hasher);

    let mut canon = IrGraph::new(graph.device());
    let mut params = Vec::new();
    for &src in &order {
        let node = graph.node(src);
        let operands: Vec<NodeId> = node.operands.iter().map(|o| NodeId(index[o.0])).collect();
        let attrs = match &node.attrs {
            NodeAttrs::DeviceData { device, dynamic_scalar, .. } => {
                NodeAttrs::DeviceData { device: *device, param_slot: None, dynamic_scalar: *dynamic_scalar }
            }
            other => other.clone(),
        };
        node.kind.hash(&mut hasher);
        node.shape.hash(&mut hasher);
        attrs.hash(&mut hasher);
        operands.hash(&mut hasher);

        let id = if node.kind == OpKind::DeviceData {
            let dynamic_scalar = node.is_dynamic_scalar();
            let slot_attrs = NodeAttrs::DeviceData { device: graph.device(), param_slot: Some(params.len()), dynamic_scalar };
            let id = canon.leaf(node.shape.clone(), slot_attrs)?;
            params.push(ParamDesc { source: src, canonical: id, shape: node.shape.clone(), dynamic_scalar });
            id
        } else {
            canon.record_node(node.kind, &operands, attrs)?
        };
        debug_assert_eq!(id.0, index[src.0]);
    }

    let canon_roots: Vec<NodeId> = roots.iter().map(|r| NodeId(index[r.0])).collect();
    canon_roots.hash(&mut hasher);
    let key = CacheKey { digest: hasher.finish128().as_u128(), param_arity: params.len() };
    Ok(CanonicalForm { key, params, graph: canon, roots: canon_roots, order })
}

impl CanonicalForm {
    pub fn device(&self) -> Device {
        self.graph.device()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Scalar, Shape};

    /// x * y + z with the addend scaled by an expanded constant 1.
    fn fig1(div: bool) -> (IrGraph, NodeId) {
        let mut g = IrGraph::new(Device(0));
        let x = g.device_data(Shape::f32([2, 4]));
        let y = g.device_data(Shape::f32([2, 4]));
        let z = g.device_data(Shape::f32([2, 4]));
        let kind = if div { OpKind::Div } else { OpKind::Mul };
        let xy = g.record_node(kind, &[x, y], NodeAttrs::None).unwrap();
        let (one, _) = g.wrap_scalar(Scalar::F32(1.0));
        let e = g.record_node(OpKind::Expand, &[one], NodeAttrs::Expand { dims: vec![2, 4] }).unwrap();
        let scaled = g.record_node(OpKind::Mul, &[e, z], NodeAttrs::None).unwrap();
        let sum = g.record_node(OpKind::Add, &[xy, scaled], NodeAttrs::None).unwrap();
        (g, sum)
    }

    #[test]
    fn fresh_recordings_share_a_key() {
        let (g1, r1) = fig1(false);
        let (g2, r2) = fig1(false);
        assert_eq!(canonicalize(&g1, &[r1]).unwrap().key, canonicalize(&g2, &[r2]).unwrap().key);
    }

    #[test]
    fn creation_order_does_not_matter() {
        let (g1, r1) = fig1(false);
        // Same wiring, leaves and constant created in a different order.
        let mut g = IrGraph::new(Device(0));
        let (one, _) = g.wrap_scalar(Scalar::F32(1.0));
        let z = g.device_data(Shape::f32([2, 4]));
        let y = g.device_data(Shape::f32([2, 4]));
        let x = g.device_data(Shape::f32([2, 4]));
        let e = g.record_node(OpKind::Expand, &[one], NodeAttrs::Expand { dims: vec![2, 4] }).unwrap();
        let scaled = g.record_node(OpKind::Mul, &[e, z], NodeAttrs::None).unwrap();
        let xy = g.record_node(OpKind::Mul, &[x, y], NodeAttrs::None).unwrap();
        let sum = g.record_node(OpKind::Add, &[xy, scaled], NodeAttrs::None).unwrap();
        let a = canonicalize(&g1, &[r1]).unwrap();
        let b = canonicalize(&g, &[sum]).unwrap();
        assert_eq!(a.key, b.key);
        // Params bind the same roles in both graphs.
        let roles = |c: &CanonicalForm, names: &[(NodeId, &'static str)]| -> Vec<&'static str> {
            c.params.iter().map(|p| names.iter().find(|(id, _)| *id == p.source).unwrap().1).collect()
        };
        let (x1, y1, z1) = (NodeId(0), NodeId(1), NodeId(2));
        assert_eq!(roles(&a, &[(x1, "x"), (y1, "y"), (z1, "z")]), roles(&b, &[(x, "x"), (y, "y"), (z, "z")]));
    }

    #[test]
    fn structural_difference_changes_key() {
        let (g1, r1) = fig1(false);
        let (g2, r2) = fig1(true);
        assert_ne!(canonicalize(&g1, &[r1]).unwrap().key, canonicalize(&g2, &[r2]).unwrap().key);
    }

    #[test]
    fn dynamic_scalars_are_masked_but_constants_are_not() {
        let key = |v: f32| {
            let mut g = IrGraph::new(Device(0));
            let x = g.device_data(Shape::f32([3]));
            let (s, _) = g.wrap_scalar(Scalar::F32(v));
            let e = g.record_node(OpKind::Expand, &[s], NodeAttrs::Expand { dims: vec![3] }).unwrap();
            let m = g.record_node(OpKind::Mul, &[x, e], NodeAttrs::None).unwrap();
            canonicalize(&g, &[m]).unwrap().key
        };
        assert_eq!(key(42.0), key(7.0));
        assert_eq!(key(42.0).param_arity, 2);
        assert_ne!(key(1.0), key(0.0));
        assert_ne!(key(1.0), key(7.0));
        assert_eq!(key(1.0).param_arity, 1);
    }

    #[test]
    fn device_is_part_of_the_key() {
        let key = |d: u32| {
            let mut g = IrGraph::new(Device(d));
            let x = g.device_data(Shape::f32([3]));
            canonicalize(&g, &[x]).unwrap().key
        };
        assert_ne!(key(0), key(1));
    }

    #[test]
    fn empty_roots_rejected() {
        let (g, _) = fig1(false);
        assert!(matches!(canonicalize(&g, &[]), Err(Error::EmptyRoots)));
    }

    #[test]
    fn unreachable_nodes_are_excluded() {
        let (mut g, r) = fig1(false);
        let stray = g.device_data(Shape::f32([5]));
        let _ = g.record_node(OpKind::Neg, &[stray], NodeAttrs::None).unwrap();
        let c = canonicalize(&g, &[r]).unwrap();
        assert_eq!(c.graph.len(), 8);
        assert_eq!(c.params.len(), 3);
    }
}
