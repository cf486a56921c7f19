use super::HostData;
use crate::error::{Error, Result};
use crate::ir::{NodeAttrs, OpKind, Scalar, Shape};

/// Arithmetic element types. The scalar functions below are the single
/// definition of each elementwise op, shared by the eager kernels, the fused
/// interpreter, and constant folding.
pub(crate) trait Numeric: Copy + PartialOrd + Send + Sync + 'static {
    const ZERO: Self;
    fn slice(data: &HostData) -> Option<&[Self]>;
    fn slice_mut(data: &mut HostData) -> Option<&mut [Self]>;
    fn from_scalar(s: Scalar) -> Option<Self>;
    fn to_scalar(self) -> Scalar;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Result<Self>;
    fn neg(self) -> Self;

    fn max(self, o: Self) -> Self {
        if o > self {
            o
        } else {
            self
        }
    }

    fn relu(self) -> Self {
        if self > Self::ZERO {
            self
        } else {
            Self::ZERO
        }
    }
}

impl Numeric for f32 {
    const ZERO: Self = 0.0;

    fn slice(data: &HostData) -> Option<&[Self]> {
        match data {
            HostData::F32(v) => Some(v),
            _ => None,
        }
    }

    fn slice_mut(data: &mut HostData) -> Option<&mut [Self]> {
        match data {
            HostData::F32(v) => Some(v),
            _ => None,
        }
    }

    fn from_scalar(s: Scalar) -> Option<Self> {
        match s {
            Scalar::F32(v) => Some(v),
            _ => None,
        }
    }

    fn to_scalar(self) -> Scalar {
        Scalar::F32(self)
    }

    fn add(self, o: Self) -> Self {
        self + o
    }

    fn sub(self, o: Self) -> Self {
        self - o
    }

    fn mul(self, o: Self) -> Self {
        self * o
    }

    fn div(self, o: Self) -> Result<Self> {
        Ok(self / o)
    }

    fn neg(self) -> Self {
        -self
    }
}

impl Numeric for i64 {
    const ZERO: Self = 0;

    fn slice(data: &HostData) -> Option<&[Self]> {
        match data {
            HostData::I64(v) => Some(v),
            _ => None,
        }
    }

    fn slice_mut(data: &mut HostData) -> Option<&mut [Self]> {
        match data {
            HostData::I64(v) => Some(v),
            _ => None,
        }
    }

    fn from_scalar(s: Scalar) -> Option<Self> {
        match s {
            Scalar::I64(v) => Some(v),
            _ => None,
        }
    }

    fn to_scalar(self) -> Scalar {
        Scalar::I64(self)
    }

    fn add(self, o: Self) -> Self {
        self.wrapping_add(o)
    }

    fn sub(self, o: Self) -> Self {
        self.wrapping_sub(o)
    }

    fn mul(self, o: Self) -> Self {
        self.wrapping_mul(o)
    }

    fn div(self, o: Self) -> Result<Self> {
        if o == 0 {
            return Err(Error::DivisionByZero);
        }
        Ok(self.wrapping_div(o))
    }

    fn neg(self) -> Self {
        self.wrapping_neg()
    }
}

#[inline]
pub(crate) fn binary_op<T: Numeric>(kind: OpKind, a: T, b: T) -> Result<T> {
    Ok(match kind {
        OpKind::Add => a.add(b),
        OpKind::Sub => a.sub(b),
        OpKind::Mul => a.mul(b),
        OpKind::Div => a.div(b)?,
        OpKind::Max => a.max(b),
        other => unreachable!("{other} is not a binary elementwise op"),
    })
}

#[inline]
pub(crate) fn unary_op<T: Numeric>(kind: OpKind, a: T) -> T {
    match kind {
        OpKind::Neg => a.neg(),
        OpKind::Relu => a.relu(),
        other => unreachable!("{other} is not a unary elementwise op"),
    }
}

fn fold<T: Numeric>(kind: OpKind, values: &[Scalar]) -> Option<Result<Scalar>> {
    let xs: Option<Vec<T>> = values.iter().map(|v| T::from_scalar(*v)).collect();
    let xs = xs?;
    Some(match xs.as_slice() {
        [a] => Ok(unary_op(kind, *a).to_scalar()),
        [a, b] => binary_op(kind, *a, *b).map(Numeric::to_scalar),
        _ => return None,
    })
}

/// Evaluates an elementwise op on host scalars, exactly as the kernels would.
pub(crate) fn fold_scalars(kind: OpKind, values: &[Scalar]) -> Option<Result<Scalar>> {
    fold::<f32>(kind, values).or_else(|| fold::<i64>(kind, values))
}

pub(crate) struct KernelArgs<'a> {
    pub kind: OpKind,
    pub inputs: &'a [&'a HostData],
    pub shapes: &'a [Shape],
    pub attrs: &'a NodeAttrs,
    pub out: &'a Shape,
}

pub(crate) type KernelFn = fn(&KernelArgs<'_>) -> Result<HostData>;

pub(crate) fn kernel_for(kind: OpKind) -> KernelFn {
    match kind {
        OpKind::DeviceData => identity,
        OpKind::Constant => constant,
        OpKind::Expand => expand,
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Max => binary_kernel,
        OpKind::Neg | OpKind::Relu => unary_kernel,
        OpKind::MatMul => matmul,
        OpKind::ReduceSum => reduce_sum,
        OpKind::Reshape => identity,
        OpKind::Permute => permute,
        OpKind::Narrow => narrow,
        OpKind::UpdateNarrow => update_narrow,
    }
}

/// Runs the kernel for `kind` without touching dispatch counters.
pub(crate) fn run(kind: OpKind, inputs: &[&HostData], shapes: &[Shape], attrs: &NodeAttrs, out: &Shape) -> Result<HostData> {
    let args = KernelArgs { kind, inputs, shapes, attrs, out };
    let result = kernel_for(kind)(&args)?;
    debug_assert_eq!(result.len(), out.element_count());
    Ok(result)
}

macro_rules! map_same {
    ($data:expr, $v:ident => $body:expr) => {
        match $data {
            HostData::F32($v) => HostData::F32($body),
            HostData::I64($v) => HostData::I64($body),
            HostData::Pred($v) => HostData::Pred($body),
        }
    };
}

fn non_numeric(op: &'static str) -> Error {
    Error::InvalidAttrs { op, reason: "arithmetic is not defined on pred".into() }
}

fn identity(args: &KernelArgs<'_>) -> Result<HostData> {
    Ok(args.inputs[0].clone())
}

fn constant(args: &KernelArgs<'_>) -> Result<HostData> {
    match args.attrs {
        NodeAttrs::Constant { value } => Ok(HostData::filled(*value, 1)),
        _ => Err(Error::InvalidAttrs { op: "constant", reason: "missing value".into() }),
    }
}

fn expand(args: &KernelArgs<'_>) -> Result<HostData> {
    let n = args.out.element_count();
    let input = args.inputs[0];
    if input.len() == n {
        return Ok(input.clone());
    }
    Ok(map_same!(input, v => vec![v[0]; n]))
}

fn zip_with<T: Numeric>(kind: OpKind, a: &[T], b: &[T]) -> Result<Vec<T>> {
    a.iter().zip(b).map(|(x, y)| binary_op(kind, *x, *y)).collect()
}

fn binary_kernel(args: &KernelArgs<'_>) -> Result<HostData> {
    let kind = args.kind;
    match (args.inputs[0], args.inputs[1]) {
        (HostData::F32(a), HostData::F32(b)) => Ok(HostData::F32(zip_with(kind, a, b)?)),
        (HostData::I64(a), HostData::I64(b)) => Ok(HostData::I64(zip_with(kind, a, b)?)),
        _ => Err(non_numeric(kind.name())),
    }
}

fn unary_kernel(args: &KernelArgs<'_>) -> Result<HostData> {
    let kind = args.kind;
    match args.inputs[0] {
        HostData::F32(a) => Ok(HostData::F32(a.iter().map(|x| unary_op(kind, *x)).collect())),
        HostData::I64(a) => Ok(HostData::I64(a.iter().map(|x| unary_op(kind, *x)).collect())),
        HostData::Pred(_) => Err(non_numeric(kind.name())),
    }
}

/// `[m, k] x [k, n]`, accumulating over `k` in increasing order.
fn matmul_slices<T: Numeric>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::ZERO;
            for p in 0..k {
                acc = acc.add(a[i * k + p].mul(b[p * n + j]));
            }
            out.push(acc);
        }
    }
    out
}

fn matmul(args: &KernelArgs<'_>) -> Result<HostData> {
    let (m, k) = (args.shapes[0].dims[0], args.shapes[0].dims[1]);
    let n = args.shapes[1].dims[1];
    match (args.inputs[0], args.inputs[1]) {
        (HostData::F32(a), HostData::F32(b)) => Ok(HostData::F32(matmul_slices(a, b, m, k, n))),
        (HostData::I64(a), HostData::I64(b)) => Ok(HostData::I64(matmul_slices(a, b, m, k, n))),
        _ => Err(non_numeric("dot")),
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Calls `f(flat_index, multi_index)` for every position of `dims` in
/// row-major order.
fn for_each_index(dims: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = dims.iter().product();
    let mut idx = vec![0usize; dims.len()];
    for flat in 0..total {
        f(flat, &idx);
        for d in (0..dims.len()).rev() {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Adds input elements into their output position in increasing input order.
fn reduce_slices<T: Numeric>(input: &[T], in_dims: &[usize], reduced: &[bool], out_len: usize) -> Vec<T> {
    let kept: Vec<usize> = in_dims.iter().zip(reduced).filter(|(_, r)| !**r).map(|(d, _)| *d).collect();
    let kept_strides = strides(&kept);
    let mut out = vec![T::ZERO; out_len];
    for_each_index(in_dims, |flat, idx| {
        let mut o = 0;
        let mut k = 0;
        for (d, &i) in idx.iter().enumerate() {
            if !reduced[d] {
                o += i * kept_strides[k];
                k += 1;
            }
        }
        out[o] = out[o].add(input[flat]);
    });
    out
}

fn reduce_sum(args: &KernelArgs<'_>) -> Result<HostData> {
    let dims = match args.attrs {
        NodeAttrs::ReduceSum { dims } => dims,
        _ => return Err(Error::InvalidAttrs { op: "reduce_sum", reason: "missing dims".into() }),
    };
    let in_dims = &args.shapes[0].dims;
    let mut reduced = vec![false; in_dims.len()];
    for &d in dims {
        reduced[d] = true;
    }
    let n = args.out.element_count();
    match args.inputs[0] {
        HostData::F32(v) => Ok(HostData::F32(reduce_slices(v, in_dims, &reduced, n))),
        HostData::I64(v) => Ok(HostData::I64(reduce_slices(v, in_dims, &reduced, n))),
        HostData::Pred(_) => Err(non_numeric("reduce_sum")),
    }
}

pub(crate) fn permute_slice<T: Copy>(input: &[T], in_dims: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(in_dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
    let mut out = Vec::with_capacity(input.len());
    for_each_index(&out_dims, |_, idx| {
        let src: usize = idx.iter().zip(perm).map(|(i, &p)| i * in_strides[p]).sum();
        out.push(input[src]);
    });
    out
}

fn permute(args: &KernelArgs<'_>) -> Result<HostData> {
    let perm = match args.attrs {
        NodeAttrs::Permute { perm } => perm,
        _ => return Err(Error::InvalidAttrs { op: "permute", reason: "missing permutation".into() }),
    };
    let dims = &args.shapes[0].dims;
    Ok(map_same!(args.inputs[0], v => permute_slice(v, dims, perm)))
}

/// (outer, size of `dim`, inner) block decomposition of a row-major shape.
fn blocks(dims: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = dims[..dim].iter().product();
    let inner = dims[dim + 1..].iter().product();
    (outer, dims[dim], inner)
}

pub(crate) fn narrow_slice<T: Copy>(input: &[T], dims: &[usize], dim: usize, start: usize, length: usize) -> Vec<T> {
    let (outer, size, inner) = blocks(dims, dim);
    let mut out = Vec::with_capacity(outer * length * inner);
    for o in 0..outer {
        let base = o * size * inner + start * inner;
        out.extend_from_slice(&input[base..base + length * inner]);
    }
    out
}

fn narrow(args: &KernelArgs<'_>) -> Result<HostData> {
    let (dim, start, length) = match *args.attrs {
        NodeAttrs::Narrow { dim, start, length } => (dim, start, length),
        _ => return Err(Error::InvalidAttrs { op: "narrow", reason: "missing range".into() }),
    };
    let dims = &args.shapes[0].dims;
    Ok(map_same!(args.inputs[0], v => narrow_slice(v, dims, dim, start, length)))
}

fn update_narrow_slice<T: Copy>(base: &[T], update: &[T], dims: &[usize], dim: usize, start: usize, length: usize) -> Vec<T> {
    let (outer, size, inner) = blocks(dims, dim);
    let mut out = base.to_vec();
    for o in 0..outer {
        let dst = o * size * inner + start * inner;
        let src = o * length * inner;
        out[dst..dst + length * inner].copy_from_slice(&update[src..src + length * inner]);
    }
    out
}

fn update_narrow(args: &KernelArgs<'_>) -> Result<HostData> {
    let (dim, start) = match *args.attrs {
        NodeAttrs::UpdateNarrow { dim, start } => (dim, start),
        _ => return Err(Error::InvalidAttrs { op: "update_narrow", reason: "missing offset".into() }),
    };
    let dims = &args.shapes[0].dims;
    let length = args.shapes[1].dims[dim];
    Ok(match (args.inputs[0], args.inputs[1]) {
        (HostData::F32(b), HostData::F32(u)) => HostData::F32(update_narrow_slice(b, u, dims, dim, start, length)),
        (HostData::I64(b), HostData::I64(u)) => HostData::I64(update_narrow_slice(b, u, dims, dim, start, length)),
        (HostData::Pred(b), HostData::Pred(u)) => HostData::Pred(update_narrow_slice(b, u, dims, dim, start, length)),
        _ => return Err(Error::DTypeMismatch { op: "update_narrow", lhs: args.shapes[0].clone(), rhs: args.shapes[1].clone() }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let data: Vec<i64> = (0..24).collect();
        let p = permute_slice(&data, &[2, 3, 4], &[1, 2, 0]);
        // element at out index (j, k, i) == in (i, j, k)
        assert_eq!(p[0..4], [0, 12, 1, 13]);
        let back = permute_slice(&p, &[3, 4, 2], &[2, 0, 1]);
        assert_eq!(back, data);
    }

    #[test]
    fn narrow_and_update_narrow_are_inverse() {
        let data: Vec<i64> = (0..16).collect();
        let n = narrow_slice(&data, &[2, 8], 1, 2, 3);
        assert_eq!(n, vec![2, 3, 4, 10, 11, 12]);
        let zeros = vec![0i64; 6];
        let u = update_narrow_slice(&data, &zeros, &[2, 8], 1, 2, 3);
        assert_eq!(u, vec![0, 1, 0, 0, 0, 5, 6, 7, 8, 9, 0, 0, 0, 13, 14, 15]);
    }

    #[test]
    fn reduce_over_middle_dim() {
        let data: Vec<i64> = (0..24).collect();
        let out = reduce_slices(&data, &[2, 3, 4], &[false, true, false], 8);
        // out[i, k] = sum_j data[i, j, k]
        assert_eq!(out[0], 4 + 8);
        assert_eq!(out[7], 15 + 19 + 23);
    }

    #[test]
    fn integer_division_by_zero() {
        assert_eq!(binary_op(OpKind::Div, 1i64, 0), Err(Error::DivisionByZero));
        assert_eq!(binary_op(OpKind::Div, i64::MIN, -1), Ok(i64::MIN));
    }

    #[test]
    fn folding_matches_scalar_ops() {
        let r = fold_scalars(OpKind::Add, &[Scalar::F32(0.1), Scalar::F32(0.2)]).unwrap().unwrap();
        assert_eq!(r, Scalar::F32(0.1f32 + 0.2f32));
        let r = fold_scalars(OpKind::Neg, &[Scalar::I64(3)]).unwrap().unwrap();
        assert_eq!(r, Scalar::I64(-3));
        assert!(fold_scalars(OpKind::Add, &[Scalar::Pred(true), Scalar::Pred(false)]).is_none());
    }
}
