//! Buffer slot assignment with liveness-based reuse and parameter donation.

use std::collections::{BTreeSet, HashMap};

use super::fusion::PlanStep;
use crate::error::{Error, Result};
use crate::ir::{IrGraph, NodeAttrs, NodeId, Shape};

/// Permission to overwrite parameter `param` with a program output.
/// `output` pins the result that should land in it; `None` lets the planner
/// pick any root of matching shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DonationRequest {
    pub param: usize,
    pub output: Option<usize>,
}

/// Where a value lives during execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loc {
    /// Read directly from the bound parameter.
    Param(usize),
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferPlan {
    /// Total slots. Slots `0..donated.len()` start out holding donated
    /// parameters; the rest are freshly allocated.
    pub slot_count: usize,
    /// `(param, slot)` for each donated parameter.
    pub donated: Vec<(usize, usize)>,
    pub step_inputs: Vec<Vec<Loc>>,
    pub step_outputs: Vec<Vec<usize>>,
    pub outputs: Vec<Loc>,
    /// `(output, param)`: the output is written into the donated parameter's
    /// storage and keeps that buffer's identity.
    pub alias_map: Vec<(usize, usize)>,
}

impl BufferPlan {
    /// Slots allocated fresh for this execution.
    pub fn fresh_slots(&self) -> usize {
        self.slot_count - self.donated.len()
    }
}

fn param_nodes(graph: &IrGraph) -> HashMap<usize, NodeId> {
    graph
        .nodes()
        .iter()
        .filter_map(|n| match n.attrs {
            NodeAttrs::DeviceData { param_slot: Some(p), .. } => Some((p, n.id)),
            _ => None,
        })
        .collect()
}

fn validate(graph: &IrGraph, roots: &[NodeId], params: &[Shape], donations: &[DonationRequest]) -> Result<()> {
    let nodes = param_nodes(graph);
    let mut seen = BTreeSet::new();
    for d in donations {
        let bad = |reason: &str| Err(Error::InvalidDonation { param: d.param, reason: reason.to_string() });
        let Some(shape) = params.get(d.param) else {
            return bad("no such parameter");
        };
        if !seen.insert(d.param) {
            return bad("donated twice");
        }
        if nodes.get(&d.param).is_some_and(|id| roots.contains(id)) {
            return bad("parameter is returned unchanged");
        }
        match d.output {
            Some(o) if o >= roots.len() => return bad("no such output"),
            Some(o) if graph.shape(roots[o]) != shape => return bad("shape or dtype differs from the output"),
            None if !roots.iter().any(|r| graph.shape(*r) == shape) => return bad("no output of matching shape"),
            _ => {}
        }
    }
    Ok(())
}

struct DonatedSlot {
    param: usize,
    output: Option<usize>,
    shape: Shape,
    free: bool,
    released: bool,
}

fn assign(graph: &IrGraph, steps: &[PlanStep], roots: &[NodeId], params: &[Shape], donations: &[DonationRequest]) -> BufferPlan {
    let nodes = param_nodes(graph);
    let mut loc: HashMap<NodeId, Loc> = nodes.iter().map(|(&p, &id)| (id, Loc::Param(p))).collect();
    let mut last_use: HashMap<NodeId, usize> = HashMap::new();
    for (k, step) in steps.iter().enumerate() {
        for v in &step.inputs {
            last_use.insert(*v, k);
        }
    }
    for r in roots {
        last_use.insert(*r, usize::MAX);
    }

    let mut donated: Vec<DonatedSlot> = Vec::new();
    let mut sorted = donations.to_vec();
    sorted.sort();
    for d in &sorted {
        let slot = donated.len();
        let live = nodes.get(&d.param).and_then(|id| last_use.get(id)).is_some();
        if let Some(id) = nodes.get(&d.param) {
            loc.insert(*id, Loc::Slot(slot));
        }
        donated.push(DonatedSlot {
            param: d.param,
            output: d.output,
            shape: params[d.param].clone(),
            free: !live,
            released: !live,
        });
    }
    let release_donated = |donated: &mut Vec<DonatedSlot>, k: usize, last_use: &HashMap<NodeId, usize>| {
        for d in donated.iter_mut().filter(|d| !d.released) {
            if nodes.get(&d.param).and_then(|id| last_use.get(id)) == Some(&k) {
                d.released = true;
                d.free = true;
            }
        }
    };

    let mut free: BTreeSet<usize> = BTreeSet::new();
    let mut next_slot = donated.len();
    let mut step_inputs = Vec::with_capacity(steps.len());
    let mut step_outputs = Vec::with_capacity(steps.len());
    let mut alias_map = Vec::new();
    for (k, step) in steps.iter().enumerate() {
        step_inputs.push(step.inputs.iter().map(|v| loc[v]).collect::<Vec<_>>());
        // Fused kernels read each element before writing it, so a donated
        // input read for the last time here may already host an output.
        if step.is_fused() {
            release_donated(&mut donated, k, &last_use);
        }
        let mut outs = Vec::with_capacity(step.outputs.len());
        for &v in &step.outputs {
            let shape = graph.shape(v);
            let root_idx: Vec<usize> = (0..roots.len()).filter(|&i| roots[i] == v).collect();
            let pinned = donated.iter().position(|d| d.free && d.output.is_some_and(|o| root_idx.contains(&o)));
            let open = || donated.iter().position(|d| d.free && d.output.is_none() && &d.shape == shape);
            let chosen = if root_idx.is_empty() { None } else { pinned.or_else(open) };
            let slot = match chosen {
                Some(i) => {
                    donated[i].free = false;
                    let output = donated[i].output.unwrap_or(root_idx[0]);
                    alias_map.push((output, donated[i].param));
                    i
                }
                None => free.pop_first().unwrap_or_else(|| {
                    next_slot += 1;
                    next_slot - 1
                }),
            };
            loc.insert(v, Loc::Slot(slot));
            outs.push(slot);
        }
        step_outputs.push(outs);
        for v in step.inputs.iter().chain(&step.outputs) {
            if let Loc::Slot(s) = loc[v] {
                let dead = last_use.get(v).is_none_or(|&u| u == k);
                if dead && s >= donated.len() {
                    free.insert(s);
                }
            }
        }
        release_donated(&mut donated, k, &last_use);
    }
    alias_map.sort();
    BufferPlan {
        slot_count: next_slot,
        donated: donated.iter().enumerate().map(|(slot, d)| (d.param, slot)).collect(),
        step_inputs,
        step_outputs,
        outputs: roots.iter().map(|r| loc[r]).collect(),
        alias_map,
    }
}

/// Assigns every step value to a slot. A slot is reused once the value it
/// holds has no later reader; program outputs stay live to the end. Donated
/// parameters only ever host program outputs, and donations that end up
/// unused are dropped so their parameters stay intact.
pub fn plan_memory(
    graph: &IrGraph,
    steps: &[PlanStep],
    roots: &[NodeId],
    params: &[Shape],
    donations: &[DonationRequest],
) -> Result<BufferPlan> {
    validate(graph, roots, params, donations)?;
    let plan = assign(graph, steps, roots, params, donations);
    let used: BTreeSet<usize> = plan.alias_map.iter().map(|&(_, p)| p).collect();
    if used.len() == donations.len() {
        return Ok(plan);
    }
    let kept: Vec<DonationRequest> = donations.iter().copied().filter(|d| used.contains(&d.param)).collect();
    Ok(assign(graph, steps, roots, params, &kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::fusion::fuse_elementwise;
    use crate::ir::{canonicalize, Device, OpKind};

    fn leaf(g: &mut IrGraph, dims: &[usize]) -> NodeId {
        g.device_data(Shape::f32(dims.to_vec()))
    }

    fn setup(g: &IrGraph, roots: &[NodeId]) -> (IrGraph, Vec<NodeId>, Vec<PlanStep>, Vec<Shape>) {
        let c = canonicalize(g, roots).unwrap();
        let steps = fuse_elementwise(&c.graph, &c.roots);
        let params = c.params.iter().map(|p| p.shape.clone()).collect();
        (c.graph, c.roots, steps, params)
    }

    #[test]
    fn chain_of_matmuls_reuses_slots() {
        let mut g = IrGraph::new(Device(0));
        let mut acc = leaf(&mut g, &[4, 4]);
        for _ in 0..6 {
            let w = leaf(&mut g, &[4, 4]);
            acc = g.record_node(OpKind::MatMul, &[acc, w], NodeAttrs::None).unwrap();
        }
        let (cg, roots, steps, params) = setup(&g, &[acc]);
        let plan = plan_memory(&cg, &steps, &roots, &params, &[]).unwrap();
        assert_eq!(steps.len(), 6);
        assert_eq!(plan.fresh_slots(), 2);
    }

    #[test]
    fn donated_weight_hosts_the_update() {
        let mut g = IrGraph::new(Device(0));
        let w = leaf(&mut g, &[8]);
        let grad = leaf(&mut g, &[8]);
        let (lr, _) = g.wrap_scalar(crate::ir::Scalar::F32(0.1));
        let e = g.record_node(OpKind::Expand, &[lr], NodeAttrs::Expand { dims: vec![8] }).unwrap();
        let step = g.record_node(OpKind::Mul, &[grad, e], NodeAttrs::None).unwrap();
        let nw = g.record_node(OpKind::Sub, &[w, step], NodeAttrs::None).unwrap();
        let c = canonicalize(&g, &[nw]).unwrap();
        let wp = c.params.iter().position(|p| p.source == w).unwrap();
        let steps = fuse_elementwise(&c.graph, &c.roots);
        let params: Vec<Shape> = c.params.iter().map(|p| p.shape.clone()).collect();
        let plan = plan_memory(&c.graph, &steps, &c.roots, &params, &[DonationRequest { param: wp, output: Some(0) }]).unwrap();
        assert_eq!(plan.alias_map, vec![(0, wp)]);
        assert_eq!(plan.outputs, vec![Loc::Slot(0)]);
        assert_eq!(plan.fresh_slots(), 0);
    }

    #[test]
    fn donation_needs_matching_shape() {
        let mut g = IrGraph::new(Device(0));
        let a = leaf(&mut g, &[3]);
        let s = g.record_node(OpKind::ReduceSum, &[a], NodeAttrs::ReduceSum { dims: vec![0] }).unwrap();
        let (cg, roots, steps, params) = setup(&g, &[s]);
        let err = plan_memory(&cg, &steps, &roots, &params, &[DonationRequest { param: 0, output: None }]).unwrap_err();
        assert!(matches!(err, Error::InvalidDonation { param: 0, .. }));
        let err = plan_memory(&cg, &steps, &roots, &params, &[DonationRequest { param: 3, output: None }]).unwrap_err();
        assert!(matches!(err, Error::InvalidDonation { param: 3, .. }));
    }

    #[test]
    fn unused_donation_is_dropped() {
        // x is still read after the only matching output exists, so it
        // cannot host it and must stay intact.
        let mut g = IrGraph::new(Device(0));
        let x = leaf(&mut g, &[2, 2]);
        let y = leaf(&mut g, &[2, 2]);
        let m = g.record_node(OpKind::MatMul, &[y, y], NodeAttrs::None).unwrap();
        let mx = g.record_node(OpKind::MatMul, &[m, x], NodeAttrs::None).unwrap();
        let r = g.record_node(OpKind::ReduceSum, &[mx], NodeAttrs::ReduceSum { dims: vec![0, 1] }).unwrap();
        let c = canonicalize(&g, &[m, r]).unwrap();
        let xp = c.params.iter().position(|p| p.source == x).unwrap();
        let steps = fuse_elementwise(&c.graph, &c.roots);
        let params: Vec<Shape> = c.params.iter().map(|p| p.shape.clone()).collect();
        let req = [DonationRequest { param: xp, output: Some(0) }];
        let plan = plan_memory(&c.graph, &steps, &c.roots, &params, &req).unwrap();
        assert!(plan.alias_map.is_empty());
        assert!(plan.donated.is_empty());
        assert_eq!(plan, plan_memory(&c.graph, &steps, &c.roots, &params, &[]).unwrap());
    }
}
