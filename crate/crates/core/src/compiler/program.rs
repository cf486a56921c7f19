use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use parking_lot::Mutex;

use super::fusion::{fuse_elementwise, unfused_steps, FusedKernel, FusedOp, PlanStep, StepKind};
use super::memory::{plan_memory, BufferPlan, DonationRequest, Loc};
use super::passes::{cse, dce, simplify};
use super::CompileOptions;
use crate::eager::kernels::{self, binary_op, unary_op, Numeric};
use crate::eager::{Buffer, HostData};
use crate::error::{Error, Result};
use crate::ir::{CacheKey, CanonicalForm, DType, IrGraph, NodeAttrs, NodeId, Scalar, Shape};

/// A runtime value bound to a program parameter.
#[derive(Debug, Clone)]
pub enum Binding {
    Buffer(Buffer),
    /// Value of a dynamic-scalar parameter.
    Scalar(Scalar),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub shape: Shape,
    pub dynamic_scalar: bool,
}

/// Result of one program execution.
#[derive(Debug)]
pub struct Execution {
    pub outputs: Vec<Buffer>,
    /// Kernel launches; a fused step counts once.
    pub dispatches: u64,
    /// `(output, param)` pairs whose output reused a donated buffer.
    pub aliased: Vec<(usize, usize)>,
    /// Slots allocated fresh by this execution's plan.
    pub fresh_slots: usize,
}

/// An optimized, scheduled program for one graph structure. Buffer plans
/// are computed per donation set and memoized.
pub struct CompiledProgram {
    pub key: CacheKey,
    pub params: Vec<ParamInfo>,
    pub graph: IrGraph,
    pub roots: Vec<NodeId>,
    pub steps: Vec<PlanStep>,
    plans: Mutex<HashMap<Vec<DonationRequest>, Arc<BufferPlan>>>,
}

impl CompiledProgram {
    pub fn compile(canon: &CanonicalForm, opts: &CompileOptions) -> Result<CompiledProgram> {
        let (g, roots) = if opts.optimize {
            let (g, roots) = simplify(&canon.graph, &canon.roots, &opts.simplify)?;
            let (g, roots) = cse(&g, &roots)?;
            dce(&g, &roots)?
        } else {
            dce(&canon.graph, &canon.roots)?
        };
        let steps = if opts.fuse { fuse_elementwise(&g, &roots) } else { unfused_steps(&g) };
        let program = CompiledProgram {
            key: canon.key,
            params: canon.params.iter().map(|p| ParamInfo { shape: p.shape.clone(), dynamic_scalar: p.dynamic_scalar }).collect(),
            graph: g,
            roots,
            steps,
            plans: Mutex::new(HashMap::new()),
        };
        program.plan(&[])?;
        Ok(program)
    }

    pub fn output_shapes(&self) -> Vec<Shape> {
        self.roots.iter().map(|r| self.graph.shape(*r).clone()).collect()
    }

    pub fn fused_step_count(&self) -> usize {
        self.steps.iter().filter(|s| s.is_fused()).count()
    }

    /// Whether parameter `p` is itself one of the outputs after optimization
    /// (for example `x * 1`). Such a parameter cannot be donated.
    pub fn returns_param(&self, p: usize) -> bool {
        self.roots
            .iter()
            .any(|r| matches!(self.graph.node(*r).attrs, NodeAttrs::DeviceData { param_slot: Some(q), .. } if q == p))
    }

    fn param_shapes(&self) -> Vec<Shape> {
        self.params.iter().map(|p| p.shape.clone()).collect()
    }

    /// The buffer plan for a donation set, computed once per distinct set.
    pub fn plan(&self, donations: &[DonationRequest]) -> Result<Arc<BufferPlan>> {
        let mut key = donations.to_vec();
        key.sort();
        if let Some(plan) = self.plans.lock().get(&key) {
            return Ok(plan.clone());
        }
        let plan = Arc::new(plan_memory(&self.graph, &self.steps, &self.roots, &self.param_shapes(), &key)?);
        self.plans.lock().entry(key).or_insert(plan.clone());
        Ok(plan)
    }

    /// Human-readable schedule: one line per step, then the outputs.
    pub fn dump_plan(&self, donations: &[DonationRequest]) -> Result<String> {
        let plan = self.plan(donations)?;
        let loc = |l: &Loc| match l {
            Loc::Param(p) => format!("p{p}"),
            Loc::Slot(s) => format!("s{s}"),
        };
        let join = |ls: Vec<String>| ls.join(",");
        let mut out = String::new();
        for (k, step) in self.steps.iter().enumerate() {
            let name = match &step.kind {
                StepKind::Fused(f) => format!("fused[{} ops]", f.node_count),
                StepKind::Single { kind, .. } => kind.name().to_string(),
            };
            let ins = join(plan.step_inputs[k].iter().map(loc).collect());
            let outs = join(plan.step_outputs[k].iter().map(|s| format!("s{s}")).collect());
            let _ = writeln!(out, "step{k}: {name} slots(in={ins}, out={outs})");
        }
        let _ = write!(out, "outputs: {}", join(plan.outputs.iter().map(loc).collect()));
        for (o, p) in &plan.alias_map {
            let _ = write!(out, ", out{o}<-p{p}");
        }
        out.push('\n');
        Ok(out)
    }

    fn check_bindings(&self, bindings: &[Binding], plan: &BufferPlan) -> Result<()> {
        if bindings.len() != self.params.len() {
            return Err(Error::ArityMismatch { op: "execute", expected: self.params.len(), got: bindings.len() });
        }
        for (index, (b, p)) in bindings.iter().zip(&self.params).enumerate() {
            let mismatch = |reason: String| Err(Error::BindingMismatch { index, reason });
            match b {
                Binding::Buffer(buf) if buf.shape() != &p.shape => {
                    return mismatch(format!("expected {}, got {}", p.shape, buf.shape()))
                }
                Binding::Buffer(buf) if buf.device() != self.graph.device() => {
                    return Err(Error::DeviceMismatch(self.graph.device(), buf.device()))
                }
                Binding::Scalar(s) if p.shape.rank() != 0 || s.dtype() != p.shape.dtype => {
                    return mismatch(format!("scalar {s:?} cannot bind {}", p.shape))
                }
                _ => {}
            }
        }
        for &(param, _) in &plan.donated {
            let Binding::Buffer(donor) = &bindings[param] else {
                return Err(Error::InvalidDonation { param, reason: "scalar bindings cannot be donated".into() });
            };
            let shared =
                bindings.iter().enumerate().any(|(i, b)| i != param && matches!(b, Binding::Buffer(o) if o.id() == donor.id()));
            if shared {
                return Err(Error::InvalidDonation { param, reason: "buffer is bound to several parameters".into() });
            }
        }
        Ok(())
    }

    /// Runs the program. Donated parameter buffers are consumed: afterwards
    /// they read as `UseAfterDonation`, and the aliased outputs carry their
    /// ids.
    pub fn execute(&self, bindings: &[Binding], donations: &[DonationRequest]) -> Result<Execution> {
        let plan = self.plan(donations)?;
        self.check_bindings(bindings, &plan)?;
        let device = self.graph.device();
        let donated: Vec<usize> = plan.donated.iter().map(|&(p, _)| p).collect();

        // Read everything that stays intact before consuming donors, so a
        // failed bind leaves all buffers untouched.
        let mut params: Vec<Option<Arc<HostData>>> = Vec::with_capacity(bindings.len());
        for (i, b) in bindings.iter().enumerate() {
            params.push(match b {
                _ if donated.contains(&i) => None,
                Binding::Buffer(buf) => Some(buf.data()?),
                Binding::Scalar(s) => Some(Arc::new(HostData::filled(*s, 1))),
            });
        }
        for &(p, _) in &plan.donated {
            if let Binding::Buffer(buf) = &bindings[p] {
                if buf.is_donated() {
                    return Err(Error::UseAfterDonation(buf.id().0));
                }
            }
        }
        let mut slots: Vec<Option<HostData>> = vec![None; plan.slot_count];
        for &(p, slot) in &plan.donated {
            if let Binding::Buffer(buf) = &bindings[p] {
                slots[slot] = Some(buf.take_for_donation()?);
            }
        }

        for (k, step) in self.steps.iter().enumerate() {
            let ins = &plan.step_inputs[k];
            let outs = &plan.step_outputs[k];
            match &step.kind {
                StepKind::Single { kind, attrs, input_shapes, out } => {
                    let data: Vec<&HostData> = ins.iter().map(|l| read(&params, &slots, *l)).collect();
                    let result = kernels::run(*kind, &data, input_shapes, attrs, out)?;
                    slots[outs[0]] = Some(result);
                }
                StepKind::Fused(kernel) => run_fused_step(kernel, ins, outs, &params, &mut slots)?,
            }
        }

        let mut remaining: HashMap<usize, usize> = HashMap::new();
        for l in &plan.outputs {
            if let Loc::Slot(s) = l {
                *remaining.entry(*s).or_default() += 1;
            }
        }
        let mut outputs = Vec::with_capacity(plan.outputs.len());
        for (i, l) in plan.outputs.iter().enumerate() {
            let shape = self.graph.shape(self.roots[i]).clone();
            let out = match *l {
                Loc::Param(p) => match &bindings[p] {
                    // Every output gets its own handle so that donating it later
                    // cannot disturb whoever else holds the input.
                    Binding::Buffer(buf) => buf.share()?,
                    Binding::Scalar(s) => Buffer::new_unchecked(shape, device, HostData::filled(*s, 1)),
                },
                Loc::Slot(s) => {
                    let left = remaining.get_mut(&s).expect("output slot");
                    *left -= 1;
                    let data = if *left == 0 { slots[s].take() } else { slots[s].clone() };
                    let data = data.expect("output slot holds a value");
                    match plan.alias_map.iter().find(|(o, _)| *o == i) {
                        Some(&(_, p)) => {
                            let Binding::Buffer(donor) = &bindings[p] else { unreachable!("checked above") };
                            Buffer::with_id(donor.id(), shape, device, data)
                        }
                        None => Buffer::new_unchecked(shape, device, data),
                    }
                }
            };
            outputs.push(out);
        }
        Ok(Execution {
            outputs,
            dispatches: self.steps.len() as u64,
            aliased: plan.alias_map.clone(),
            fresh_slots: plan.fresh_slots(),
        })
    }
}

fn read<'a>(params: &'a [Option<Arc<HostData>>], slots: &'a [Option<HostData>], l: Loc) -> &'a HostData {
    match l {
        Loc::Param(p) => params[p].as_deref().expect("parameter is readable"),
        Loc::Slot(s) => slots[s].as_ref().expect("slot holds a value"),
    }
}

enum Src<'a, T> {
    Data(&'a [T]),
    /// Same storage as output `j` of this step.
    Out(usize),
}

fn run_fused_step(
    kernel: &FusedKernel,
    ins: &[Loc],
    outs: &[usize],
    params: &[Option<Arc<HostData>>],
    slots: &mut [Option<HostData>],
) -> Result<()> {
    let n = kernel.shape.element_count();
    let dtype = kernel.shape.dtype;
    let mut out_data: Vec<HostData> = outs
        .iter()
        .map(|&s| match slots[s].take() {
            Some(d) if d.dtype() == dtype && d.len() == n => d,
            _ => HostData::filled(Scalar::zero(dtype), n),
        })
        .collect();
    let sources: Vec<SrcRef<'_>> = ins
        .iter()
        .map(|l| match *l {
            Loc::Slot(s) if outs.contains(&s) => SrcRef::Out(outs.iter().position(|&o| o == s).unwrap()),
            l => SrcRef::Data(read(params, slots, l)),
        })
        .collect();
    match dtype {
        DType::F32 => eval_fused::<f32>(kernel, &sources, &mut out_data)?,
        DType::I64 => eval_fused::<i64>(kernel, &sources, &mut out_data)?,
        DType::Pred => {
            return Err(Error::InvalidAttrs { op: "fused", reason: "pred kernels are not fusible".into() });
        }
    }
    for (&s, d) in outs.iter().zip(out_data) {
        slots[s] = Some(d);
    }
    Ok(())
}

enum SrcRef<'a> {
    Data(&'a HostData),
    Out(usize),
}

fn eval_fused<T: Numeric>(kernel: &FusedKernel, sources: &[SrcRef<'_>], outs: &mut [HostData]) -> Result<()> {
    let type_error = || Error::InvalidAttrs { op: "fused", reason: "input dtype differs from the kernel".into() };
    let mut typed: Vec<Src<'_, T>> = Vec::with_capacity(sources.len());
    for s in sources {
        typed.push(match s {
            SrcRef::Data(d) => Src::Data(T::slice(d).ok_or_else(type_error)?),
            SrcRef::Out(j) => Src::Out(*j),
        });
    }
    let mut out_slices: Vec<&mut [T]> = Vec::with_capacity(outs.len());
    for d in outs.iter_mut() {
        out_slices.push(T::slice_mut(d).ok_or_else(type_error)?);
    }
    let consts: Vec<T> = kernel
        .ops
        .iter()
        .map(|op| match op {
            FusedOp::Const(c) => T::from_scalar(*c).ok_or_else(type_error),
            _ => Ok(T::ZERO),
        })
        .collect::<Result<_>>()?;
    let mut regs: Vec<T> = vec![T::ZERO; kernel.ops.len()];
    for i in 0..kernel.shape.element_count() {
        for (r, op) in kernel.ops.iter().enumerate() {
            regs[r] = match *op {
                FusedOp::Input { index, broadcast } => {
                    let at = if broadcast { 0 } else { i };
                    match &typed[index] {
                        Src::Data(d) => d[at],
                        Src::Out(j) => out_slices[*j][at],
                    }
                }
                FusedOp::Const(_) => consts[r],
                FusedOp::Unary(kind, a) => unary_op(kind, regs[a]),
                FusedOp::Binary(kind, a, b) => binary_op(kind, regs[a], regs[b])?,
            };
        }
        for (j, &r) in kernel.outputs.iter().enumerate() {
            out_slices[j][i] = regs[r];
        }
    }
    Ok(())
}
