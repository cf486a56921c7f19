use std::cmp::Ordering;

use super::{Buffer, HostData};
use crate::error::{Error, Result};
use crate::ir::{DType, Device, Shape};

/// Operations that exist only on the eager backend. They have no `OpKind`,
/// so using one forces the runtime through the fallback path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EagerOnlyOp {
    /// Stable ascending argsort along `dim`; produces `s64` indices.
    Argsort { dim: usize },
    /// Number of non-zero elements, as a rank-0 `s64`.
    NonzeroCount,
}

impl EagerOnlyOp {
    pub fn from_name(name: &str, dim: usize) -> Result<Self> {
        match name {
            "argsort" => Ok(EagerOnlyOp::Argsort { dim }),
            "nonzero_count" | "count_nonzero" => Ok(EagerOnlyOp::NonzeroCount),
            other => Err(Error::UnknownOp(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EagerOnlyOp::Argsort { .. } => "argsort",
            EagerOnlyOp::NonzeroCount => "nonzero_count",
        }
    }
}

// Signed zeros compare equal so that -0.0/+0.0 differences never reorder.
fn sort_key(x: f32) -> f32 {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

fn argsort_lanes<T: Copy>(values: &[T], dims: &[usize], dim: usize, cmp: impl Fn(T, T) -> Ordering) -> Vec<i64> {
    let size = dims[dim];
    let inner: usize = dims[dim + 1..].iter().product();
    let outer: usize = dims[..dim].iter().product();
    let mut out = vec![0i64; values.len()];
    let mut lane: Vec<usize> = Vec::with_capacity(size);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * size * inner + k * inner + i;
            lane.clear();
            lane.extend(0..size);
            lane.sort_by(|&a, &b| cmp(values[at(a)], values[at(b)]));
            for (k, &src) in lane.iter().enumerate() {
                out[at(k)] = src as i64;
            }
        }
    }
    out
}

/// Runs an eager-only op on one input buffer.
pub fn extra_eager_only(op: EagerOnlyOp, input: &Buffer, device: Device) -> Result<Buffer> {
    let data = input.data()?;
    let shape = input.shape();
    match op {
        EagerOnlyOp::Argsort { dim } => {
            if dim >= shape.rank() {
                return Err(Error::InvalidAttrs { op: "argsort", reason: format!("dim {dim} out of range for {shape}") });
            }
            let out = match data.as_ref() {
                HostData::F32(v) => argsort_lanes(v, &shape.dims, dim, |a, b| sort_key(a).total_cmp(&sort_key(b))),
                HostData::I64(v) => argsort_lanes(v, &shape.dims, dim, |a, b| a.cmp(&b)),
                HostData::Pred(v) => argsort_lanes(v, &shape.dims, dim, |a, b| a.cmp(&b)),
            };
            Ok(Buffer::new_unchecked(Shape::new(DType::I64, shape.dims.clone()), device, HostData::I64(out)))
        }
        EagerOnlyOp::NonzeroCount => {
            let count = match data.as_ref() {
                HostData::F32(v) => v.iter().filter(|x| **x != 0.0).count(),
                HostData::I64(v) => v.iter().filter(|x| **x != 0).count(),
                HostData::Pred(v) => v.iter().filter(|x| **x).count(),
            };
            Ok(Buffer::new_unchecked(Shape::scalar(DType::I64), device, HostData::I64(vec![count as i64])))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argsort(values: Vec<f32>, dims: &[usize], dim: usize) -> Vec<i64> {
        let b = Buffer::from_host(values.into(), dims, Device(0)).unwrap();
        let out = extra_eager_only(EagerOnlyOp::Argsort { dim }, &b, Device(0)).unwrap();
        out.read_to_host().unwrap().as_i64().unwrap().to_vec()
    }

    /// Independent oracle: selection by repeated minimum, keeping first index on ties.
    fn oracle(values: &[f32]) -> Vec<i64> {
        let mut taken = vec![false; values.len()];
        (0..values.len())
            .map(|_| {
                let mut best: Option<usize> = None;
                for i in 0..values.len() {
                    if !taken[i] && best.is_none_or(|b| values[i] < values[b]) {
                        best = Some(i);
                    }
                }
                taken[best.unwrap()] = true;
                best.unwrap() as i64
            })
            .collect()
    }

    #[test]
    fn argsort_vector() {
        assert_eq!(argsort(vec![3.0, 1.0, 2.0], &[3], 0), vec![1, 2, 0]);
        assert_eq!(argsort(vec![5.0], &[1], 0), vec![0]);
    }

    #[test]
    fn argsort_rows() {
        let values = vec![0.5, -1.0, 2.0, 2.0, 9.0, 1.0, 1.0, -3.0];
        let got = argsort(values.clone(), &[2, 4], 1);
        let mut expected = oracle(&values[..4]);
        expected.extend(oracle(&values[4..]));
        assert_eq!(got, expected);
        assert_eq!(got, vec![1, 0, 2, 3, 3, 1, 2, 0]);
    }

    #[test]
    fn argsort_columns() {
        // dims [2, 2], sort along dim 0
        assert_eq!(argsort(vec![4.0, 1.0, 3.0, 2.0], &[2, 2], 0), vec![1, 0, 0, 1]);
    }

    #[test]
    fn signed_zero_does_not_reorder() {
        assert_eq!(argsort(vec![-0.0, 0.0], &[2], 0), argsort(vec![0.0, -0.0], &[2], 0));
    }

    #[test]
    fn nonzero_count() {
        let b = Buffer::from_host(vec![0.0f32, -0.0, 2.0, 3.0].into(), &[4], Device(0)).unwrap();
        let out = extra_eager_only(EagerOnlyOp::NonzeroCount, &b, Device(0)).unwrap();
        assert_eq!(out.read_to_host().unwrap(), HostData::I64(vec![2]));
        assert_eq!(out.shape().rank(), 0);
    }

    #[test]
    fn unknown_name() {
        assert_eq!(EagerOnlyOp::from_name("fft", 0), Err(Error::UnknownOp("fft".into())));
    }
}
