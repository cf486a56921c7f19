//! The demo and benchmark programs. Each runs against a caller-supplied
//! runtime so the same code is measured in lazy and eager mode.

use std::fmt;
use std::str::FromStr;

use lazytensor::eager::randn_data;
use lazytensor::{Device, HostData, LazyTensor, Result, Runtime};

use crate::report::checksum;

pub const DEVICE: Device = Device(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Workload {
    /// `x * y + z` with the scale factor of `add`.
    Fig1,
    /// A host loop accumulating into one tensor.
    Loop,
    /// An in-place add through a permuted view.
    ViewUpdate,
    /// Two-layer MLP trained by weight perturbation.
    MlpTrain,
    /// Eight dependent elementwise ops per step.
    ElementwiseChain,
    /// A loop whose tensor grows by one element per step.
    ShapeUnstable,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::Fig1 => "fig1",
            Workload::Loop => "loop",
            Workload::ViewUpdate => "view-update",
            Workload::MlpTrain => "mlp-train",
            Workload::ElementwiseChain => "elementwise-chain",
            Workload::ShapeUnstable => "shape-unstable",
        }
    }

    /// Steps used when none are given.
    pub fn default_steps(self) -> usize {
        match self {
            Workload::Fig1 | Workload::ViewUpdate => 1,
            Workload::Loop => 2,
            Workload::MlpTrain | Workload::ElementwiseChain | Workload::ShapeUnstable => 10,
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <Workload as clap::ValueEnum>::from_str(s, true)
    }
}

/// What to capture besides the result.
#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    pub ir: bool,
    pub plan: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub checksum: u64,
    pub values: Vec<HostData>,
    pub ir: Option<String>,
    pub plan: Option<String>,
}

struct Run<'a> {
    rt: &'a Runtime,
    capture: Capture,
    ir: Option<String>,
    plan: Option<String>,
}

impl Run<'_> {
    /// Captures the pending graph behind `roots` the first time it is asked.
    fn snapshot(&mut self, roots: &[&LazyTensor]) -> Result<()> {
        if self.capture.ir && self.ir.is_none() {
            self.ir = Some(self.rt.dump_ir(roots)?);
        }
        if self.capture.plan && self.plan.is_none() {
            self.plan = Some(self.rt.dump_plan(roots)?);
        }
        Ok(())
    }

    fn finish(&mut self, outputs: &[&LazyTensor]) -> Result<Outcome> {
        let values = outputs.iter().map(|t| t.to_host()).collect::<Result<Vec<_>>>()?;
        Ok(Outcome { checksum: checksum(&values), values, ir: self.ir.take(), plan: self.plan.take() })
    }
}

pub fn run(w: Workload, rt: &Runtime, seed: u64, steps: usize, capture: Capture) -> Result<Outcome> {
    let mut r = Run { rt, capture, ir: None, plan: None };
    match w {
        Workload::Fig1 => fig1(&mut r, seed),
        Workload::Loop => accumulate(&mut r, seed, steps),
        Workload::ViewUpdate => view_update(&mut r, seed),
        Workload::MlpTrain => mlp_train(&mut r, seed, steps),
        Workload::ElementwiseChain => elementwise_chain(&mut r, seed, steps),
        Workload::ShapeUnstable => shape_unstable(&mut r, seed, steps),
    }
}

fn fig1(r: &mut Run<'_>, seed: u64) -> Result<Outcome> {
    let rt = r.rt;
    let x = rt.randn(&[2, 4], DEVICE, seed)?;
    let y = rt.randn(&[2, 4], DEVICE, seed + 1)?;
    let z = rt.randn(&[2, 4], DEVICE, seed + 2)?;
    let out = x.mul(&y)?.add_scaled(&z, 1.0f32)?;
    r.snapshot(&[&out])?;
    r.finish(&[&out])
}

fn accumulate(r: &mut Run<'_>, seed: u64, steps: usize) -> Result<Outcome> {
    let rt = r.rt;
    let x = rt.randn(&[2, 4], DEVICE, seed)?;
    let s = rt.full(&[2, 4], 0.0f32, DEVICE)?;
    for _ in 0..steps {
        s.add_(&x)?;
    }
    r.snapshot(&[&s])?;
    r.finish(&[&s])
}

fn view_update(r: &mut Run<'_>, seed: u64) -> Result<Outcome> {
    let rt = r.rt;
    let x = rt.randn(&[2, 3, 4], DEVICE, seed)?;
    let v = x.permute(&[1, 2, 0])?;
    v.add_(42.0f32)?;
    r.snapshot(&[&x, &v])?;
    r.finish(&[&x, &v])
}

/// Sum of squared errors of the MLP on `(x, y)`.
fn mlp_loss(x: &LazyTensor, y: &LazyTensor, w1: &LazyTensor, w2: &LazyTensor) -> Result<LazyTensor> {
    let err = x.matmul(w1)?.relu()?.matmul(w2)?.sub(y)?;
    err.mul(&err)?.sum_all()
}

/// Trains by antithetic weight perturbation: each step probes the loss at
/// `w + s*p` and `w - s*p` for a fresh random direction `p` and moves along
/// `p` by the finite-difference slope. No gradients are needed.
fn mlp_train(r: &mut Run<'_>, seed: u64, steps: usize) -> Result<Outcome> {
    const SIGMA: f32 = 0.05;
    const LR: f32 = 0.002;
    let rt = r.rt;
    let x = rt.randn(&[8, 4], DEVICE, seed)?;
    let y = rt.randn(&[8, 2], DEVICE, seed + 1)?;
    let init = |n: usize, seed: u64| -> Vec<f32> {
        randn_data(n, seed).as_f32().expect("randn is f32").iter().map(|v| v * 0.5).collect()
    };
    let w1 = rt.from_host(init(64, seed + 2), &[4, 16], DEVICE)?;
    let w2 = rt.from_host(init(32, seed + 3), &[16, 2], DEVICE)?;
    let mut loss = None;
    for step in 0..steps as u64 {
        let p1 = rt.randn(&[4, 16], DEVICE, seed.wrapping_add(1000 + 2 * step))?;
        let p2 = rt.randn(&[16, 2], DEVICE, seed.wrapping_add(1001 + 2 * step))?;
        let plus = mlp_loss(&x, &y, &w1.add_scaled(&p1, SIGMA)?, &w2.add_scaled(&p2, SIGMA)?)?;
        let minus = mlp_loss(&x, &y, &w1.add_scaled(&p1, -SIGMA)?, &w2.add_scaled(&p2, -SIGMA)?)?;
        let slope = plus.sub(&minus)?.mul_scalar(LR / (2.0 * SIGMA))?;
        let step_loss = plus.add(&minus)?.mul_scalar(0.5f32)?;
        w1.sub_(&p1.mul(&slope.expand(&[4, 16])?)?)?;
        w2.sub_(&p2.mul(&slope.expand(&[16, 2])?)?)?;
        loss = Some(step_loss);
        r.snapshot(&[&w1, &w2, loss.as_ref().expect("set")])?;
        rt.mark_step(DEVICE, false)?;
    }
    let mut outputs = vec![&w1, &w2];
    outputs.extend(loss.as_ref());
    r.finish(&outputs)
}

fn elementwise_chain(r: &mut Run<'_>, seed: u64, steps: usize) -> Result<Outcome> {
    let rt = r.rt;
    let x = rt.randn(&[64], DEVICE, seed)?;
    let y = rt.full(&[64], 0.5f32, DEVICE)?;
    for _ in 0..steps {
        let mut t = x.clone();
        for i in 0..8 {
            t = match i % 4 {
                0 => t.add(&y)?,
                1 => t.mul(&y)?,
                2 => t.sub(&y)?,
                _ => t.maximum(&y)?,
            };
        }
        x.assign_(&t)?;
        drop(t);
        r.snapshot(&[&x])?;
        rt.mark_step(DEVICE, false)?;
    }
    r.finish(&[&x])
}

/// Each step works on a tensor one element longer than the last, so every
/// step records a graph of a new shape.
fn shape_unstable(r: &mut Run<'_>, seed: u64, steps: usize) -> Result<Outcome> {
    let rt = r.rt;
    let mut total = Vec::new();
    for step in 0..steps {
        let n = step + 1;
        let t = rt.randn(&[n], DEVICE, seed.wrapping_add(step as u64))?;
        let out = t.mul(&t)?.add_scalar(1.5f32)?.relu()?.sum_all()?;
        r.snapshot(&[&out])?;
        rt.mark_step(DEVICE, false)?;
        total.push(out);
    }
    let refs: Vec<&LazyTensor> = total.iter().collect();
    r.finish(&refs)
}
