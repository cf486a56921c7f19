use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, KernelFn};
use super::{extra_eager_only, Buffer, EagerOnlyOp};
use crate::error::{Error, Result};
use crate::ir::{infer_shape, Device, NodeAttrs, OpKind, Shape};

/// Table of eager kernels with per-kind dispatch counters.
pub struct KernelRegistry {
    table: [KernelFn; OpKind::ALL.len()],
    dispatches: [AtomicU64; OpKind::ALL.len()],
    fallback_dispatches: AtomicU64,
}

impl Default for KernelRegistry {
    fn default() -> Self {
        KernelRegistry {
            table: OpKind::ALL.map(kernels::kernel_for),
            dispatches: Default::default(),
            fallback_dispatches: AtomicU64::new(0),
        }
    }
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs one kernel on `inputs`, producing a fresh buffer on `device`.
    /// Inputs are never written.
    pub fn dispatch(&self, device: Device, kind: OpKind, inputs: &[Buffer], attrs: &NodeAttrs) -> Result<Buffer> {
        let shapes: Vec<Shape> = inputs.iter().map(|b| b.shape().clone()).collect();
        // A `device_data` dispatch is a copy of its bound input.
        let out = match (kind, shapes.as_slice()) {
            (OpKind::DeviceData, [bound]) => bound.clone(),
            (OpKind::DeviceData, _) => return Err(Error::ArityMismatch { op: kind.name(), expected: 1, got: shapes.len() }),
            _ => infer_shape(kind, &shapes, attrs)?,
        };
        let data: Vec<_> = inputs.iter().map(Buffer::data).collect::<Result<_>>()?;
        let refs: Vec<&_> = data.iter().map(|d| d.as_ref()).collect();
        let args = kernels::KernelArgs { kind, inputs: &refs, shapes: &shapes, attrs, out: &out };
        let result = (self.table[kind.index()])(&args)?;
        self.dispatches[kind.index()].fetch_add(1, Ordering::Relaxed);
        Ok(Buffer::new_unchecked(out, device, result))
    }

    /// Runs an op that has no compiler lowering.
    pub fn dispatch_eager_only(&self, device: Device, op: EagerOnlyOp, input: &Buffer) -> Result<Buffer> {
        let out = extra_eager_only(op, input, device)?;
        self.fallback_dispatches.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    pub fn dispatch_count(&self, kind: OpKind) -> u64 {
        self.dispatches[kind.index()].load(Ordering::Relaxed)
    }

    pub fn total_dispatches(&self) -> u64 {
        self.dispatches.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    pub fn fallback_dispatches(&self) -> u64 {
        self.fallback_dispatches.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eager::HostData;
    use crate::ir::Scalar;

    fn buf(values: Vec<f32>, dims: &[usize]) -> Buffer {
        Buffer::from_host(values.into(), dims, Device(0)).unwrap()
    }

    #[test]
    fn elementwise_product() {
        let reg = KernelRegistry::new();
        let a = buf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = buf(vec![2.0; 4], &[2, 2]);
        let out = reg.dispatch(Device(0), OpKind::Mul, &[a, b], &NodeAttrs::None).unwrap();
        assert_eq!(out.read_to_host().unwrap(), HostData::F32(vec![2.0, 4.0, 6.0, 8.0]));
        assert_eq!(reg.dispatch_count(OpKind::Mul), 1);
    }

    #[test]
    fn add_expanded_zero_is_a_copy() {
        let reg = KernelRegistry::new();
        let x = buf(vec![1.5, -0.0, 3.25], &[3]);
        let zero = reg.dispatch(Device(0), OpKind::Constant, &[], &NodeAttrs::Constant { value: Scalar::F32(0.0) }).unwrap();
        let e = reg.dispatch(Device(0), OpKind::Expand, &[zero], &NodeAttrs::Expand { dims: vec![3] }).unwrap();
        let out = reg.dispatch(Device(0), OpKind::Add, &[x.clone(), e], &NodeAttrs::None).unwrap();
        assert!(out.read_to_host().unwrap().same_values(&x.read_to_host().unwrap()));
        assert_ne!(out.id(), x.id());
    }

    #[test]
    fn permute_round_trip_via_dispatch() {
        let reg = KernelRegistry::new();
        let x = buf((0..24).map(|v| v as f32).collect(), &[2, 3, 4]);
        let p = reg
            .dispatch(Device(0), OpKind::Permute, std::slice::from_ref(&x), &NodeAttrs::Permute { perm: vec![1, 2, 0] })
            .unwrap();
        assert_eq!(p.shape().dims, vec![3, 4, 2]);
        let back = reg.dispatch(Device(0), OpKind::Permute, &[p], &NodeAttrs::Permute { perm: vec![2, 0, 1] }).unwrap();
        assert_eq!(back.read_to_host().unwrap(), x.read_to_host().unwrap());
    }

    #[test]
    fn shape_errors_surface() {
        let reg = KernelRegistry::new();
        let a = buf(vec![1.0; 8], &[2, 4]);
        let b = buf(vec![1.0; 9], &[3, 3]);
        assert!(reg.dispatch(Device(0), OpKind::Add, &[a, b], &NodeAttrs::None).is_err());
        assert_eq!(reg.total_dispatches(), 0);
    }

    #[test]
    fn integer_division_by_zero_is_an_error() {
        let reg = KernelRegistry::new();
        let a = Buffer::from_host(vec![4i64, 5].into(), &[2], Device(0)).unwrap();
        let b = Buffer::from_host(vec![2i64, 0].into(), &[2], Device(0)).unwrap();
        let err = reg.dispatch(Device(0), OpKind::Div, &[a, b], &NodeAttrs::None).unwrap_err();
        assert_eq!(err, crate::Error::DivisionByZero);
    }
}
