//! Property tests over randomly generated IR graphs.

use std::collections::{BTreeSet, HashMap};

use lazytensor::compiler::{cse, dce, simplify, Binding, CompileCache, CompileOptions, CompiledProgram, SimplifyOptions};
use lazytensor::eager::{evaluate, KernelRegistry};
use lazytensor::ir::{canonicalize, dump_text, infer_shape, IrGraph, NodeAttrs, NodeId, OpKind};
use lazytensor::{Buffer, Device, HostData, Scalar, Shape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D0: Device = Device(0);
const SCALARS: [f32; 6] = [0.0, 1.0, 2.5, -1.0, 0.5, 3.0];

/// One recording instruction; operands are picked from earlier nodes by index.
#[derive(Debug, Clone)]
struct Instr {
    op: u8,
    a: usize,
    b: usize,
    scalar: usize,
}

fn instrs(max: usize) -> impl Strategy<Value = Vec<Instr>> {
    prop::collection::vec(
        (0u8..16, any::<usize>(), any::<usize>(), 0..SCALARS.len()).prop_map(|(op, a, b, scalar)| Instr { op, a, b, scalar }),
        1..max,
    )
}

/// A recorded graph plus the values its leaves are bound to.
struct Case {
    graph: IrGraph,
    roots: Vec<NodeId>,
    leaves: HashMap<NodeId, Buffer>,
    scalars: HashMap<NodeId, Scalar>,
}

fn pick(nodes: &[NodeId], i: usize) -> NodeId {
    nodes[i % nodes.len()]
}

fn build(prog: &[Instr], seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = IrGraph::new(D0);
    let mut leaves = HashMap::new();
    let mut scalars = HashMap::new();
    let mut by_shape: HashMap<Vec<usize>, Vec<NodeId>> = HashMap::new();
    let mut new_leaf = |g: &mut IrGraph, dims: &[usize], rng: &mut ChaCha8Rng| {
        let id = g.device_data(Shape::f32(dims.to_vec()));
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-4i32..=4) as f32 * 0.5).collect();
        leaves.insert(id, Buffer::from_host(data.into(), dims, D0).unwrap());
        id
    };
    let first = new_leaf(&mut g, &[2, 3], &mut rng);
    by_shape.entry(vec![2, 3]).or_default().push(first);
    for ins in prog {
        let shapes: Vec<Vec<usize>> = {
            let mut s: Vec<_> = by_shape.keys().cloned().collect();
            s.sort();
            s
        };
        let dims = shapes[ins.a % shapes.len()].clone();
        let pool = by_shape[&dims].clone();
        let x = pick(&pool, ins.b);
        let y = pick(&pool, ins.a / 7);
        let node = match ins.op {
            0 => Some(new_leaf(&mut g, &dims, &mut rng)),
            1 => {
                let (s, dynamic) = g.wrap_scalar(Scalar::F32(SCALARS[ins.scalar]));
                if let Some(v) = dynamic {
                    scalars.insert(s, v);
                }
                Some(g.record_node(OpKind::Expand, &[s], NodeAttrs::Expand { dims: dims.clone() }).unwrap())
            }
            5 => {
                // Denominators are kept at or above 0.5.
                let (half, v) = g.wrap_scalar(Scalar::F32(0.5));
                scalars.insert(half, v.unwrap());
                let e = g.record_node(OpKind::Expand, &[half], NodeAttrs::Expand { dims: dims.clone() }).unwrap();
                let d = g.record_node(OpKind::Max, &[y, e], NodeAttrs::None).unwrap();
                Some(g.record_node(OpKind::Div, &[x, d], NodeAttrs::None).unwrap())
            }
            2..=6 => {
                let kind = [OpKind::Add, OpKind::Sub, OpKind::Mul, OpKind::Div, OpKind::Max][ins.op as usize - 2];
                Some(g.record_node(kind, &[x, y], NodeAttrs::None).unwrap())
            }
            7 => Some(g.record_node(OpKind::Neg, &[x], NodeAttrs::None).unwrap()),
            8 => Some(g.record_node(OpKind::Relu, &[x], NodeAttrs::None).unwrap()),
            9 if dims.len() == 2 => Some(g.record_node(OpKind::Permute, &[x], NodeAttrs::Permute { perm: vec![1, 0] }).unwrap()),
            10 => {
                let mut flipped = dims.clone();
                flipped.reverse();
                Some(g.record_node(OpKind::Reshape, &[x], NodeAttrs::Reshape { dims: flipped }).unwrap())
            }
            11 if dims.len() == 2 && dims[1] > 1 => {
                let attrs = NodeAttrs::Narrow { dim: 1, start: ins.b % dims[1], length: 1 };
                let slice = g.record_node(OpKind::Narrow, &[x], attrs).unwrap();
                let part = g.record_node(OpKind::Neg, &[slice], NodeAttrs::None).unwrap();
                let attrs = NodeAttrs::UpdateNarrow { dim: 1, start: ins.a % dims[1] };
                Some(g.record_node(OpKind::UpdateNarrow, &[y, part], attrs).unwrap())
            }
            12 if dims.len() == 2 => {
                let flipped = [dims[1], dims[0]];
                let other = by_shape
                    .get(&flipped[..])
                    .map(|p| pick(p, ins.a))
                    .unwrap_or_else(|| g.record_node(OpKind::Permute, &[y], NodeAttrs::Permute { perm: vec![1, 0] }).unwrap());
                Some(g.record_node(OpKind::MatMul, &[x, other], NodeAttrs::None).unwrap())
            }
            13 if !dims.is_empty() => {
                let attrs = NodeAttrs::ReduceSum { dims: vec![ins.b % dims.len()] };
                Some(g.record_node(OpKind::ReduceSum, &[x], attrs).unwrap())
            }
            14 => {
                // Two structurally equal subtrees, for CSE to find.
                let m1 = g.record_node(OpKind::Mul, &[x, y], NodeAttrs::None).unwrap();
                let m2 = g.record_node(OpKind::Mul, &[x, y], NodeAttrs::None).unwrap();
                Some(g.record_node(OpKind::Add, &[m1, m2], NodeAttrs::None).unwrap())
            }
            _ => {
                let (z, _) = g.wrap_scalar(Scalar::F32(SCALARS[ins.scalar % 2]));
                let e = g.record_node(OpKind::Expand, &[z], NodeAttrs::Expand { dims: dims.clone() }).unwrap();
                let kind = if ins.b % 2 == 0 { OpKind::Add } else { OpKind::Mul };
                Some(g.record_node(kind, &[x, e], NodeAttrs::None).unwrap())
            }
        };
        if let Some(n) = node {
            by_shape.entry(g.shape(n).dims.clone()).or_default().push(n);
        }
    }
    let last = NodeId(g.len() - 1);
    let mut roots = vec![last];
    if prog.len() > 3 {
        roots.push(NodeId(prog[0].a % g.len()));
    }
    Case { graph: g, roots, leaves, scalars }
}

fn reference(case: &Case, roots: &[NodeId]) -> Vec<HostData> {
    evaluate(&KernelRegistry::new(), &case.graph, roots, |n| match case.leaves.get(&n.id) {
        Some(b) => Ok(b.clone()),
        None => Buffer::from_host(HostData::filled(case.scalars[&n.id], 1), &[], D0),
    })
    .unwrap()
    .iter()
    .map(|b| b.read_to_host().unwrap())
    .collect()
}

/// Every node evaluates to finite values. The simplifier assumes finite
/// arithmetic (`x * 0 -> 0`), like fast-math compilers do.
fn all_finite(case: &Case) -> bool {
    let all: Vec<NodeId> = (0..case.graph.len()).map(NodeId).collect();
    reference(case, &all).iter().all(|d| d.as_f32().is_none_or(|v| v.iter().all(|x| x.is_finite())))
}

fn run_compiled(case: &Case, opts: &CompileOptions) -> Vec<HostData> {
    let canon = canonicalize(&case.graph, &case.roots).unwrap();
    let program = CompiledProgram::compile(&canon, opts).unwrap();
    let bindings: Vec<Binding> = canon
        .params
        .iter()
        .map(|p| match case.leaves.get(&p.source) {
            Some(b) => Binding::Buffer(b.clone()),
            None => Binding::Scalar(case.scalars[&p.source]),
        })
        .collect();
    let exec = program.execute(&bindings, &[]).unwrap();
    exec.outputs.iter().map(|b| b.read_to_host().unwrap()).collect()
}

/// Same graph, recorded in a different (still topological) order.
fn relabel(g: &IrGraph, roots: &[NodeId], seed: u64) -> (IrGraph, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = IrGraph::new(g.device());
    let mut map: HashMap<NodeId, NodeId> = HashMap::new();
    let mut pending: Vec<NodeId> = (0..g.len()).map(NodeId).collect();
    while !pending.is_empty() {
        let ready: Vec<usize> =
            (0..pending.len()).filter(|&i| g.node(pending[i]).operands.iter().all(|o| map.contains_key(o))).collect();
        let n = g.node(pending.remove(ready[rng.gen_range(0..ready.len())]));
        let id = match n.kind {
            OpKind::DeviceData | OpKind::Constant => out.leaf(n.shape.clone(), n.attrs.clone()).unwrap(),
            _ => {
                let ops: Vec<NodeId> = n.operands.iter().map(|o| map[o]).collect();
                out.record_node(n.kind, &ops, n.attrs.clone()).unwrap()
            }
        };
        map.insert(n.id, id);
    }
    (out, roots.iter().map(|r| map[r]).collect())
}

type Label = (OpKind, Shape, NodeAttrs);

fn label(g: &IrGraph, id: NodeId) -> Label {
    let n = g.node(id);
    let attrs = match &n.attrs {
        NodeAttrs::DeviceData { device, dynamic_scalar, .. } => {
            NodeAttrs::DeviceData { device: *device, param_slot: None, dynamic_scalar: *dynamic_scalar }
        }
        a => a.clone(),
    };
    (n.kind, n.shape.clone(), attrs)
}

fn reachable(g: &IrGraph, roots: &[NodeId]) -> Vec<NodeId> {
    let mut seen = BTreeSet::new();
    let mut stack = roots.to_vec();
    while let Some(n) = stack.pop() {
        if seen.insert(n) {
            stack.extend(g.node(n).operands.iter().copied());
        }
    }
    seen.into_iter().collect()
}

/// Brute-force isomorphism of the root-reachable parts of two graphs, roots
/// matched in order and dynamic scalar values ignored.
fn isomorphic(g1: &IrGraph, r1: &[NodeId], g2: &IrGraph, r2: &[NodeId]) -> bool {
    let (a, b) = (reachable(g1, r1), reachable(g2, r2));
    if a.len() != b.len() || r1.len() != r2.len() {
        return false;
    }
    #[allow(clippy::too_many_arguments)]
    fn go(
        i: usize,
        a: &[NodeId],
        b: &[NodeId],
        g1: &IrGraph,
        g2: &IrGraph,
        map: &mut HashMap<NodeId, NodeId>,
        used: &mut BTreeSet<NodeId>,
        fixed: &HashMap<NodeId, NodeId>,
    ) -> bool {
        let Some(&n) = a.get(i) else { return true };
        let ops1 = &g1.node(n).operands;
        for &m in b {
            if used.contains(&m) || label(g1, n) != label(g2, m) || fixed.get(&n).is_some_and(|&f| f != m) {
                continue;
            }
            let ops2 = &g2.node(m).operands;
            if ops1.len() != ops2.len() || ops1.iter().zip(ops2).any(|(o1, o2)| map[o1] != *o2) {
                continue;
            }
            map.insert(n, m);
            used.insert(m);
            if go(i + 1, a, b, g1, g2, map, used, fixed) {
                return true;
            }
            map.remove(&n);
            used.remove(&m);
        }
        false
    }
    let mut fixed = HashMap::new();
    for (x, y) in r1.iter().zip(r2) {
        if *fixed.entry(*x).or_insert(*y) != *y {
            return false;
        }
    }
    let mut map = HashMap::new();
    go(0, &a, &b, g1, g2, &mut map, &mut BTreeSet::new(), &fixed) && r1.iter().zip(r2).all(|(x, y)| map[x] == *y) && {
        // Distinct roots on one side must stay distinct on the other.
        let s1: BTreeSet<_> = r1.iter().collect();
        let s2: BTreeSet<_> = r2.iter().collect();
        s1.len() == s2.len()
    }
}

/// A copy of `case`'s graph with one node's kind or attrs changed.
fn mutate(g: &IrGraph, at: usize) -> IrGraph {
    let mut out = IrGraph::new(g.device());
    let target = (0..g.len()).cycle().skip(at % g.len()).take(g.len()).find(|&i| {
        matches!(g.node(NodeId(i)).kind, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Max | OpKind::Neg | OpKind::Relu)
    });
    for n in g.nodes() {
        let kind = match (Some(n.id.0) == target, n.kind) {
            (true, OpKind::Add) => OpKind::Sub,
            (true, OpKind::Sub) => OpKind::Mul,
            (true, OpKind::Mul) => OpKind::Max,
            (true, OpKind::Max) => OpKind::Add,
            (true, OpKind::Neg) => OpKind::Relu,
            (true, OpKind::Relu) => OpKind::Neg,
            (_, k) => k,
        };
        match kind {
            OpKind::DeviceData | OpKind::Constant => out.leaf(n.shape.clone(), n.attrs.clone()).unwrap(),
            _ => out.record_node(kind, &n.operands, n.attrs.clone()).unwrap(),
        };
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, max_global_rejects: 100_000, ..ProptestConfig::default() })]

    #[test]
    fn shapes_close_and_operands_precede(prog in instrs(25), seed in any::<u64>()) {
        let case = build(&prog, seed);
        for n in case.graph.nodes() {
            prop_assert!(n.operands.iter().all(|o| o.0 < n.id.0));
            if n.operands.is_empty() {
                continue;
            }
            let shapes: Vec<Shape> = n.operands.iter().map(|o| case.graph.shape(*o).clone()).collect();
            prop_assert_eq!(&infer_shape(n.kind, &shapes, &n.attrs).unwrap(), &n.shape);
        }
    }

    #[test]
    fn cache_keys_match_exactly_for_isomorphic_graphs(
        prog in instrs(12),
        other in instrs(12),
        seed in any::<u64>(),
        which in 0u8..3,
    ) {
        let case = build(&prog, seed);
        let (g2, r2) = match which {
            0 => relabel(&case.graph, &case.roots, seed ^ 1),
            1 => (mutate(&case.graph, seed as usize), case.roots.clone()),
            _ => {
                let c = build(&other, seed);
                (c.graph, c.roots)
            }
        };
        let k1 = canonicalize(&case.graph, &case.roots).unwrap().key;
        let k2 = canonicalize(&g2, &r2).unwrap().key;
        prop_assert_eq!(k1 == k2, isomorphic(&case.graph, &case.roots, &g2, &r2));
        if which == 0 {
            prop_assert_eq!(k1, k2);
        }
    }

    #[test]
    fn dumps_depend_only_on_structure(prog in instrs(12), seed in any::<u64>()) {
        let case = build(&prog, seed);
        let (g2, r2) = relabel(&case.graph, &case.roots, seed.rotate_left(7));
        let c1 = canonicalize(&case.graph, &case.roots).unwrap();
        let c2 = canonicalize(&g2, &r2).unwrap();
        prop_assert_eq!(c1.key, c2.key);
        prop_assert_eq!(dump_text(&case.graph, &case.roots).unwrap(), dump_text(&g2, &r2).unwrap());
    }

    #[test]
    fn only_zero_and_one_are_embedded(v in any::<f32>(), i in any::<i64>()) {
        let mut g = IrGraph::new(D0);
        let (_, dynamic) = g.wrap_scalar(Scalar::F32(v));
        let special = v.to_bits() == 0f32.to_bits() || v.to_bits() == 1f32.to_bits();
        prop_assert_eq!(dynamic.is_none(), special);
        let (_, dynamic) = g.wrap_scalar(Scalar::I64(i));
        prop_assert_eq!(dynamic.is_none(), i == 0 || i == 1);
        for s in [0.0f32, 1.0] {
            prop_assert!(g.wrap_scalar(Scalar::F32(s)).1.is_none());
        }
    }

    #[test]
    fn compiled_programs_match_the_interpreter(prog in instrs(25), seed in any::<u64>()) {
        let case = build(&prog, seed);
        prop_assume!(all_finite(&case));
        let expected = reference(&case, &case.roots);
        let variants = [
            CompileOptions::default(),
            CompileOptions { fuse: false, ..Default::default() },
            CompileOptions { optimize: false, ..Default::default() },
        ];
        for opts in variants {
            let got = run_compiled(&case, &opts);
            prop_assert_eq!(got.len(), expected.len());
            for (g, e) in got.iter().zip(&expected) {
                prop_assert!(g.same_values(e), "{:?}: {:?} vs {:?}", opts, g, e);
            }
        }
    }

    #[test]
    fn passes_never_grow_the_graph(prog in instrs(25), seed in any::<u64>()) {
        let case = build(&prog, seed);
        let size = reachable(&case.graph, &case.roots).len();
        let (g, r) = dce(&case.graph, &case.roots).unwrap();
        prop_assert!(g.len() <= size);
        let (g2, r2) = cse(&g, &r).unwrap();
        prop_assert!(g2.len() <= g.len());
        let (g3, _) = simplify(&g2, &r2, &SimplifyOptions::default()).unwrap();
        prop_assert!(g3.len() <= g2.len());
    }

    #[test]
    fn fused_dispatches_never_exceed_eager_ops(prog in instrs(25), seed in any::<u64>()) {
        let case = build(&prog, seed);
        let canon = canonicalize(&case.graph, &case.roots).unwrap();
        let ops = canon.graph.nodes().iter().filter(|n| n.kind != OpKind::DeviceData).count();
        let fused = CompiledProgram::compile(&canon, &CompileOptions::default()).unwrap();
        let plain = CompiledProgram::compile(&canon, &CompileOptions { optimize: false, fuse: false, ..Default::default() }).unwrap();
        prop_assert!(fused.steps.len() <= plain.steps.len());
        prop_assert!(plain.steps.len() <= ops);
        if fused.steps.iter().any(|s| s.is_fused() && s.outputs.len() + 1 < s.inputs.len() + 2) {
            prop_assert!(fused.steps.len() <= ops);
        }
    }

    #[test]
    fn cache_compiles_each_key_once(prog in instrs(12), seed in any::<u64>(), n in 1usize..6) {
        let case = build(&prog, seed);
        let cache = CompileCache::new(CompileOptions::default());
        for i in 0..n {
            let (g, r) = relabel(&case.graph, &case.roots, seed.wrapping_add(i as u64));
            cache.get_or_compile(&canonicalize(&g, &r).unwrap()).unwrap();
        }
        prop_assert_eq!(cache.compile_count(), 1);
        prop_assert_eq!(cache.hit_count(), n as u64 - 1);
    }

    #[test]
    fn execution_leaves_inputs_untouched(prog in instrs(25), seed in any::<u64>()) {
        let case = build(&prog, seed);
        let before: HashMap<NodeId, u64> =
            case.leaves.iter().map(|(id, b)| (*id, b.read_to_host().unwrap().checksum())).collect();
        run_compiled(&case, &CompileOptions::default());
        for (id, b) in &case.leaves {
            prop_assert_eq!(b.read_to_host().unwrap().checksum(), before[id]);
        }
    }
}
