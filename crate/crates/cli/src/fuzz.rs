//! Differential fuzzing: random tensor programs run under the lazy runtime
//! and under eager dispatch must produce the same host-visible values.

use std::fmt;

use lazytensor::compiler::CompileOptions;
use lazytensor::{
    DType, EagerOnlyOp, Error, HostData, InPlaceOp, LazyTensor, Mode, Runtime, RuntimeConfig, Scalar, Shape, ViewOp,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::workloads::DEVICE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    /// Division by `max(b, 0.5)`, which keeps values finite.
    SafeDiv,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Relu,
}

/// One statement. Every value-producing statement defines the next fresh
/// variable `v<n>`.
#[derive(Debug, Clone)]
pub enum Stmt {
    Randn {
        dims: Vec<usize>,
        seed: u64,
    },
    Full {
        dims: Vec<usize>,
        value: f32,
    },
    Binary {
        op: BinOp,
        a: usize,
        b: usize,
        alpha: Option<f32>,
    },
    WithScalar {
        op: BinOp,
        a: usize,
        value: Scalar,
    },
    Unary {
        op: UnOp,
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Sum {
        a: usize,
        dim: usize,
    },
    View {
        a: usize,
        op: ViewOp,
    },
    Fallback {
        a: usize,
        op: EagerOnlyOp,
    },
    InPlace {
        target: usize,
        op: InPlaceOp,
        rhs: FuzzRhs,
    },
    /// `if item(sum(cond)) > 0 { then } else { otherwise }`; both arms are
    /// in-place statements so shapes never depend on the branch.
    Branch {
        cond: usize,
        then: Box<Stmt>,
        otherwise: Box<Stmt>,
    },
    MarkStep {
        wait: bool,
    },
    Drop {
        var: usize,
    },
}

#[derive(Debug, Clone, Copy)]
pub enum FuzzRhs {
    Var(usize),
    Scalar(Scalar),
}

impl Stmt {
    fn defines(&self) -> bool {
        !matches!(self, Stmt::InPlace { .. } | Stmt::Branch { .. } | Stmt::MarkStep { .. } | Stmt::Drop { .. })
    }

    /// IR nodes (or eager kernels) the statement records, roughly.
    fn weight(&self) -> usize {
        match self {
            Stmt::Randn { .. } | Stmt::Full { .. } | Stmt::MarkStep { .. } | Stmt::Drop { .. } => 0,
            Stmt::Binary { alpha: Some(_), .. } | Stmt::WithScalar { .. } => 3,
            Stmt::Binary { op: BinOp::SafeDiv, .. } => 4,
            Stmt::Branch { then, otherwise, .. } => 1 + then.weight().max(otherwise.weight()),
            Stmt::InPlace { rhs: FuzzRhs::Scalar(_), .. } => 3,
            _ => 1,
        }
    }
}

fn scalar_text(s: &Scalar) -> String {
    match s {
        Scalar::F32(v) => format!("{v:?}"),
        Scalar::I64(v) => format!("{v}"),
        Scalar::Pred(v) => format!("{v}"),
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stmt::Randn { dims, seed } => write!(f, "randn({dims:?}, seed={seed})"),
            Stmt::Full { dims, value } => write!(f, "full({dims:?}, {value:?})"),
            Stmt::Binary { op, a, b, alpha: Some(al) } => write!(f, "{op:?}(v{a}, v{b}, alpha={al:?})"),
            Stmt::Binary { op, a, b, alpha: None } => write!(f, "{op:?}(v{a}, v{b})"),
            Stmt::WithScalar { op, a, value } => write!(f, "{op:?}(v{a}, {})", scalar_text(value)),
            Stmt::Unary { op, a } => write!(f, "{op:?}(v{a})"),
            Stmt::MatMul { a, b } => write!(f, "matmul(v{a}, v{b})"),
            Stmt::Sum { a, dim } => write!(f, "sum(v{a}, dim={dim})"),
            Stmt::View { a, op } => write!(f, "view(v{a}, {op:?})"),
            Stmt::Fallback { a, op } => write!(f, "{}(v{a})", op.name()),
            Stmt::InPlace { target, op, rhs } => {
                let rhs = match rhs {
                    FuzzRhs::Var(v) => format!("v{v}"),
                    FuzzRhs::Scalar(s) => scalar_text(s),
                };
                write!(f, "v{target}.{op:?}_({rhs})")
            }
            Stmt::Branch { cond, then, otherwise } => {
                write!(f, "if item(sum(v{cond})) > 0 {{ {then} }} else {{ {otherwise} }}")
            }
            Stmt::MarkStep { wait } => write!(f, "mark_step(wait={wait})"),
            Stmt::Drop { var } => write!(f, "drop v{var}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Program {
    pub seed: u64,
    pub stmts: Vec<Stmt>,
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# program seed {}", self.seed)?;
        let mut next = 0;
        for s in &self.stmts {
            if s.defines() {
                writeln!(f, "v{next} = {s}")?;
                next += 1;
            } else {
                writeln!(f, "{s}")?;
            }
        }
        Ok(())
    }
}

impl Program {
    /// The same program without barriers.
    pub fn without_barriers(&self) -> Program {
        let stmts = self.stmts.iter().filter(|s| !matches!(s, Stmt::MarkStep { .. })).cloned().collect();
        Program { seed: self.seed, stmts }
    }

    /// The same program with a non-blocking barrier after every statement
    /// whose index is set in `mask`.
    pub fn with_barriers(&self, mask: u64) -> Program {
        let mut stmts = Vec::new();
        for (i, s) in self.stmts.iter().enumerate() {
            stmts.push(s.clone());
            if mask >> (i % 64) & 1 == 1 {
                stmts.push(Stmt::MarkStep { wait: false });
            }
        }
        Program { seed: self.seed, stmts }
    }
}

const F32_SCALARS: [f32; 7] = [0.0, 1.0, 2.0, -1.5, 0.5, 3.0, -0.25];
const I64_SCALARS: [i64; 4] = [0, 1, 2, -3];
const SHAPES: [&[usize]; 4] = [&[2, 3], &[3, 2], &[6], &[2, 3, 2]];

struct Var {
    shape: Shape,
    alive: bool,
}

struct Gen {
    rng: ChaCha8Rng,
    vars: Vec<Var>,
    stmts: Vec<Stmt>,
}

impl Gen {
    fn alive(&self, pred: impl Fn(&Shape) -> bool) -> Vec<usize> {
        (0..self.vars.len()).filter(|&i| self.vars[i].alive && pred(&self.vars[i].shape)).collect()
    }

    fn choose(&mut self, from: &[usize]) -> Option<usize> {
        from.choose(&mut self.rng).copied()
    }

    fn scalar_for(&mut self, dtype: DType) -> Scalar {
        match dtype {
            DType::I64 => Scalar::I64(*I64_SCALARS.choose(&mut self.rng).expect("non-empty")),
            _ => Scalar::F32(*F32_SCALARS.choose(&mut self.rng).expect("non-empty")),
        }
    }

    fn define(&mut self, stmt: Stmt, shape: Shape) {
        self.stmts.push(stmt);
        self.vars.push(Var { shape, alive: true });
    }

    fn input(&mut self) {
        let dims = SHAPES.choose(&mut self.rng).expect("non-empty").to_vec();
        let stmt = if self.rng.gen_bool(0.8) {
            Stmt::Randn { dims: dims.clone(), seed: self.rng.gen_range(0..1000) }
        } else {
            Stmt::Full { dims: dims.clone(), value: *F32_SCALARS.choose(&mut self.rng).expect("non-empty") }
        };
        self.define(stmt, Shape::f32(dims));
    }

    /// An in-place statement on an existing variable, if there is one.
    fn in_place(&mut self, scalar_only: bool) -> Option<Stmt> {
        let target = self.choose(&self.alive(|s| s.dtype != DType::Pred))?;
        let shape = self.vars[target].shape.clone();
        let op = *[InPlaceOp::Add, InPlaceOp::Sub, InPlaceOp::Mul, InPlaceOp::Assign].choose(&mut self.rng).expect("non-empty");
        let same = self.alive(|s| *s == shape);
        let use_var = !scalar_only && self.rng.gen_bool(0.5) && !(op == InPlaceOp::Mul && shape.dtype == DType::I64);
        let rhs = match use_var {
            true => FuzzRhs::Var(self.choose(&same).expect("target itself")),
            false => FuzzRhs::Scalar(self.scalar_for(shape.dtype)),
        };
        Some(Stmt::InPlace { target, op, rhs })
    }

    fn step(&mut self) {
        let f32s = self.alive(|s| s.dtype == DType::F32);
        match self.rng.gen_range(0..100) {
            0..=7 => self.input(),
            8..=27 => {
                let Some(a) = self.choose(&f32s) else { return self.input() };
                let shape = self.vars[a].shape.clone();
                let b = self.choose(&self.alive(|s| *s == shape)).expect("a itself");
                let op =
                    *[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::SafeDiv, BinOp::Max].choose(&mut self.rng).expect("non-empty");
                let alpha =
                    (op == BinOp::Add && self.rng.gen_bool(0.3)).then(|| *F32_SCALARS.choose(&mut self.rng).expect("non-empty"));
                self.define(Stmt::Binary { op, a, b, alpha }, shape);
            }
            28..=37 => {
                let Some(a) = self.choose(&self.alive(|s| s.dtype != DType::Pred)) else { return self.input() };
                let shape = self.vars[a].shape.clone();
                let ops: &[BinOp] = match shape.dtype {
                    DType::I64 => &[BinOp::Add, BinOp::Sub, BinOp::Max],
                    _ => &[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::SafeDiv, BinOp::Max],
                };
                let op = *ops.choose(&mut self.rng).expect("non-empty");
                let value = self.scalar_for(shape.dtype);
                self.define(Stmt::WithScalar { op, a, value }, shape);
            }
            38..=45 => {
                let Some(a) = self.choose(&f32s) else { return self.input() };
                let op = if self.rng.gen_bool(0.5) { UnOp::Neg } else { UnOp::Relu };
                let shape = self.vars[a].shape.clone();
                self.define(Stmt::Unary { op, a }, shape);
            }
            46..=50 => {
                let Some(a) = self.choose(&self.alive(|s| s.dtype == DType::F32 && s.rank() == 2)) else { return self.input() };
                let k = self.vars[a].shape.dims[1];
                let Some(b) = self.choose(&self.alive(|s| s.dtype == DType::F32 && s.rank() == 2 && s.dims[0] == k)) else {
                    return;
                };
                let shape = Shape::f32(vec![self.vars[a].shape.dims[0], self.vars[b].shape.dims[1]]);
                self.define(Stmt::MatMul { a, b }, shape);
            }
            51..=54 => {
                let Some(a) = self.choose(&self.alive(|s| s.dtype != DType::Pred && s.rank() > 0)) else { return self.input() };
                let shape = self.vars[a].shape.clone();
                let dim = self.rng.gen_range(0..shape.rank());
                let mut dims = shape.dims.clone();
                dims.remove(dim);
                self.define(Stmt::Sum { a, dim }, shape.with_dims(dims));
            }
            55..=66 => {
                let Some(a) = self.choose(&self.alive(|s| s.rank() > 0)) else { return self.input() };
                let shape = self.vars[a].shape.clone();
                let (op, dims) = match self.rng.gen_range(0..3) {
                    0 => {
                        let n = shape.element_count();
                        let dims = if shape.rank() == 1 && n.is_multiple_of(2) { vec![2, n / 2] } else { vec![n] };
                        (ViewOp::Reshape { dims: dims.clone() }, dims)
                    }
                    1 => {
                        let mut perm: Vec<usize> = (0..shape.rank()).collect();
                        perm.shuffle(&mut self.rng);
                        let dims = perm.iter().map(|&p| shape.dims[p]).collect();
                        (ViewOp::Permute { perm }, dims)
                    }
                    _ => {
                        let dim = self.rng.gen_range(0..shape.rank());
                        let size = shape.dims[dim];
                        let start = self.rng.gen_range(0..size);
                        let length = self.rng.gen_range(1..=size - start);
                        let mut dims = shape.dims.clone();
                        dims[dim] = length;
                        (ViewOp::Narrow { dim, start, length }, dims)
                    }
                };
                self.define(Stmt::View { a, op }, shape.with_dims(dims));
            }
            67..=70 => {
                let Some(a) = self.choose(&self.alive(|s| s.dtype != DType::Pred && s.rank() > 0)) else { return self.input() };
                let shape = self.vars[a].shape.clone();
                let (op, out) = if self.rng.gen_bool(0.6) {
                    let dim = self.rng.gen_range(0..shape.rank());
                    (EagerOnlyOp::Argsort { dim }, Shape::new(DType::I64, shape.dims.clone()))
                } else {
                    (EagerOnlyOp::NonzeroCount, Shape::scalar(DType::I64))
                };
                self.define(Stmt::Fallback { a, op }, out);
            }
            71..=85 => {
                if let Some(s) = self.in_place(false) {
                    self.stmts.push(s);
                }
            }
            86..=90 => {
                let Some(cond) = self.choose(&self.alive(|s| s.dtype != DType::Pred)) else { return };
                let (Some(then), Some(otherwise)) = (self.in_place(true), self.in_place(true)) else { return };
                self.stmts.push(Stmt::Branch { cond, then: Box::new(then), otherwise: Box::new(otherwise) });
            }
            91..=95 => {
                let wait = self.rng.gen_bool(0.5);
                self.stmts.push(Stmt::MarkStep { wait });
            }
            _ => {
                let alive = self.alive(|_| true);
                if alive.len() > 2 {
                    let var = self.choose(&alive).expect("non-empty");
                    self.vars[var].alive = false;
                    self.stmts.push(Stmt::Drop { var });
                }
            }
        }
    }
}

/// A random program whose statements record at most `max_nodes` ops.
pub fn generate(seed: u64, max_nodes: usize) -> Program {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), vars: Vec::new(), stmts: Vec::new() };
    g.input();
    g.input();
    let mut budget = max_nodes;
    let mut stalls = 0;
    while stalls < 8 {
        let before = g.stmts.len();
        g.step();
        let added: usize = g.stmts[before..].iter().map(Stmt::weight).sum();
        if added > budget {
            // Undo: the statement does not fit.
            for s in g.stmts.drain(before..) {
                if s.defines() {
                    g.vars.pop();
                }
                if let Stmt::Drop { var } = s {
                    g.vars[var].alive = true;
                }
            }
            stalls += 1;
            continue;
        }
        budget -= added;
        if budget == 0 {
            break;
        }
    }
    Program { seed, stmts: g.stmts }
}

/// Host-visible results: every variable still alive at the end, in order,
/// or the first error.
pub type Observed = Result<Vec<(usize, HostData)>, Error>;

fn exec(stmt: &Stmt, rt: &Runtime, vars: &mut Vec<Option<LazyTensor>>) -> Result<(), Error> {
    let get = |vars: &Vec<Option<LazyTensor>>, i: usize| vars[i].clone().expect("live variable");
    let value = match stmt {
        Stmt::Randn { dims, seed } => rt.randn(dims, DEVICE, *seed)?,
        Stmt::Full { dims, value } => rt.full(dims, *value, DEVICE)?,
        Stmt::Binary { op, a, b, alpha } => {
            let (a, b) = (get(vars, *a), get(vars, *b));
            match op {
                BinOp::Add => match alpha {
                    Some(al) => a.add_scaled(&b, *al)?,
                    None => a.add(&b)?,
                },
                BinOp::Sub => a.sub(&b)?,
                BinOp::Mul => a.mul(&b)?,
                BinOp::SafeDiv => a.div(&b.max_scalar(0.5f32)?)?,
                BinOp::Max => a.maximum(&b)?,
            }
        }
        Stmt::WithScalar { op, a, value } => {
            let a = get(vars, *a);
            match op {
                BinOp::Add => a.add_scalar(*value)?,
                BinOp::Sub => a.sub_scalar(*value)?,
                BinOp::Mul => a.mul_scalar(*value)?,
                BinOp::SafeDiv => a.div_scalar(Scalar::F32(value.as_f64().abs().max(0.5) as f32))?,
                BinOp::Max => a.max_scalar(*value)?,
            }
        }
        Stmt::Unary { op, a } => match op {
            UnOp::Neg => get(vars, *a).neg()?,
            UnOp::Relu => get(vars, *a).relu()?,
        },
        Stmt::MatMul { a, b } => get(vars, *a).matmul(&get(vars, *b))?,
        Stmt::Sum { a, dim } => get(vars, *a).sum(&[*dim])?,
        Stmt::View { a, op } => {
            let a = get(vars, *a);
            match op {
                ViewOp::Reshape { dims } => a.view(dims)?,
                ViewOp::Permute { perm } => a.permute(perm)?,
                ViewOp::Narrow { dim, start, length } => a.narrow(*dim, *start, *length)?,
            }
        }
        Stmt::Fallback { a, op } => get(vars, *a).fallback(*op)?,
        Stmt::InPlace { target, op, rhs: r } => {
            let t = get(vars, *target);
            match r {
                FuzzRhs::Var(v) => t.in_place(*op, &get(vars, *v))?,
                FuzzRhs::Scalar(s) => t.in_place(*op, *s)?,
            };
            return Ok(());
        }
        Stmt::Branch { cond, then, otherwise } => {
            let taken = get(vars, *cond).sum_all()?.item()?.as_f64() > 0.0;
            return exec(if taken { then } else { otherwise }, rt, vars);
        }
        Stmt::MarkStep { wait } => return rt.mark_step(DEVICE, *wait),
        Stmt::Drop { var } => {
            vars[*var] = None;
            return Ok(());
        }
    };
    vars.push(Some(value));
    Ok(())
}

/// Runs `p` on `rt`, returning the variable handles (`None` once dropped).
pub fn execute(p: &Program, rt: &Runtime) -> Result<Vec<Option<LazyTensor>>, Error> {
    let mut vars: Vec<Option<LazyTensor>> = Vec::new();
    for s in &p.stmts {
        exec(s, rt, &mut vars)?;
    }
    Ok(vars)
}

/// Runs `p` on `rt` and reads every surviving variable.
pub fn run_program(p: &Program, rt: &Runtime) -> Observed {
    let vars = execute(p, rt)?;
    vars.iter().enumerate().filter_map(|(i, v)| v.as_ref().map(|t| t.to_host().map(|d| (i, d)))).collect()
}

fn finite(o: &Observed) -> bool {
    match o {
        Ok(vals) => vals.iter().all(|(_, d)| d.as_f32().is_none_or(|v| v.iter().all(|x| x.is_finite()))),
        Err(_) => true,
    }
}

/// Whether two observations agree bit for bit (signed zeros aside).
pub fn same(a: &Observed, b: &Observed) -> bool {
    match (a, b) {
        (Ok(x), Ok(y)) => x.len() == y.len() && x.iter().zip(y).all(|((i, d), (j, e))| i == j && d.same_values(e)),
        (Err(x), Err(y)) => x == y,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FuzzConfig {
    pub seed: u64,
    pub count: usize,
    pub max_nodes: usize,
    pub compile: CompileOptions,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig { seed: 0, count: 100, max_nodes: 25, compile: CompileOptions::default() }
    }
}

/// A lazy/eager disagreement, with what is needed to reproduce it.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub program: Program,
    pub lazy: Observed,
    pub eager: Observed,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "divergence for program seed {}:", self.program.seed)?;
        write!(f, "{}", self.program)?;
        writeln!(f, "lazy:  {:?}", self.lazy)?;
        write!(f, "eager: {:?}", self.eager)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FuzzSummary {
    pub programs: usize,
    /// Programs whose eager result had infinities or NaNs; the simplifier
    /// assumes finite arithmetic, so these are not compared.
    pub skipped: usize,
    pub divergence: Option<Divergence>,
}

/// Seed of the `i`-th program of a run.
pub fn program_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

pub fn lazy_runtime(compile: CompileOptions, donation: bool) -> Runtime {
    Runtime::new(RuntimeConfig { mode: Mode::Lazy, compile, donation, ..RuntimeConfig::default() })
}

/// Runs up to `count` programs, stopping at the first divergence.
pub fn fuzz(cfg: &FuzzConfig) -> FuzzSummary {
    let mut summary = FuzzSummary::default();
    for i in 0..cfg.count {
        let program = generate(program_seed(cfg.seed, i), cfg.max_nodes);
        let eager = run_program(&program, &Runtime::new(RuntimeConfig::eager()));
        let lazy = run_program(&program, &lazy_runtime(cfg.compile, true));
        summary.programs += 1;
        if !finite(&eager) {
            summary.skipped += 1;
            continue;
        }
        if !same(&lazy, &eager) {
            summary.divergence = Some(Divergence { program, lazy, eager });
            break;
        }
    }
    summary
}
