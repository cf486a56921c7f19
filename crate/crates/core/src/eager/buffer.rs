use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::ir::{DType, Device, Scalar, Shape};

/// Contiguous row-major host values.
#[derive(Debug, Clone, PartialEq)]
pub enum HostData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    Pred(Vec<bool>),
}

impl HostData {
    pub fn dtype(&self) -> DType {
        match self {
            HostData::F32(_) => DType::F32,
            HostData::I64(_) => DType::I64,
            HostData::Pred(_) => DType::Pred,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            HostData::F32(v) => v.len(),
            HostData::I64(v) => v.len(),
            HostData::Pred(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            HostData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match self {
            HostData::I64(v) => Some(v),
            _ => None,
        }
    }

    pub fn get(&self, i: usize) -> Scalar {
        match self {
            HostData::F32(v) => Scalar::F32(v[i]),
            HostData::I64(v) => Scalar::I64(v[i]),
            HostData::Pred(v) => Scalar::Pred(v[i]),
        }
    }

    pub fn filled(value: Scalar, len: usize) -> HostData {
        match value {
            Scalar::F32(v) => HostData::F32(vec![v; len]),
            Scalar::I64(v) => HostData::I64(vec![v; len]),
            Scalar::Pred(v) => HostData::Pred(vec![v; len]),
        }
    }

    /// Equality that treats `-0.0` and `+0.0` as the same value and compares
    /// everything else bit for bit (NaNs included).
    pub fn same_values(&self, other: &HostData) -> bool {
        match (self, other) {
            (HostData::F32(a), HostData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| normalized_bits(*x) == normalized_bits(*y))
            }
            _ => self == other,
        }
    }

    /// 64-bit FNV-1a checksum over values, with signed zeros folded together.
    pub fn checksum(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET ^ self.dtype() as u64;
        let mut feed = |word: u64| {
            for byte in word.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        match self {
            HostData::F32(v) => v.iter().for_each(|x| feed(normalized_bits(*x) as u64)),
            HostData::I64(v) => v.iter().for_each(|x| feed(*x as u64)),
            HostData::Pred(v) => v.iter().for_each(|x| feed(*x as u64)),
        }
        h
    }
}

fn normalized_bits(x: f32) -> u32 {
    if x == 0.0 {
        0
    } else {
        x.to_bits()
    }
}

impl From<Vec<f32>> for HostData {
    fn from(v: Vec<f32>) -> Self {
        HostData::F32(v)
    }
}

impl From<Vec<i64>> for HostData {
    fn from(v: Vec<i64>) -> Self {
        HostData::I64(v)
    }
}

impl From<Vec<bool>> for HostData {
    fn from(v: Vec<bool>) -> Self {
        HostData::Pred(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub u64);

impl BufferId {
    fn fresh() -> BufferId {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        BufferId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

struct BufferInner {
    id: BufferId,
    shape: Shape,
    device: Device,
    data: RwLock<Option<Arc<HostData>>>,
}

/// A device buffer handle. Clones share the same storage.
///
/// Storage is immutable except through donation, which moves it out of the
/// handle; later reads through any handle fail with `UseAfterDonation`.
#[derive(Clone)]
pub struct Buffer(Arc<BufferInner>);

impl Buffer {
    /// Allocates a buffer holding `data` with the given dims.
    pub fn from_host(data: HostData, dims: &[usize], device: Device) -> Result<Buffer> {
        let shape = Shape::new(data.dtype(), dims);
        if shape.element_count() != data.len() {
            return Err(Error::LengthMismatch { expected: shape.element_count(), got: data.len(), shape });
        }
        Ok(Buffer::with_id(BufferId::fresh(), shape, device, data))
    }

    pub(crate) fn new_unchecked(shape: Shape, device: Device, data: HostData) -> Buffer {
        debug_assert_eq!(shape.element_count(), data.len());
        Buffer::with_id(BufferId::fresh(), shape, device, data)
    }

    pub(crate) fn with_id(id: BufferId, shape: Shape, device: Device, data: HostData) -> Buffer {
        Buffer(Arc::new(BufferInner { id, shape, device, data: RwLock::new(Some(Arc::new(data))) }))
    }

    /// A new handle with a fresh id over the same immutable storage. Donating
    /// either handle leaves the other readable.
    pub(crate) fn share(&self) -> Result<Buffer> {
        let data = self.data()?;
        Ok(Buffer(Arc::new(BufferInner {
            id: BufferId::fresh(),
            shape: self.0.shape.clone(),
            device: self.0.device,
            data: RwLock::new(Some(data)),
        })))
    }

    pub fn id(&self) -> BufferId {
        self.0.id
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn device(&self) -> Device {
        self.0.device
    }

    /// Shared access to the contents.
    pub fn data(&self) -> Result<Arc<HostData>> {
        self.0.data.read().clone().ok_or(Error::UseAfterDonation(self.0.id.0))
    }

    /// Copies the contents out to the host.
    pub fn read_to_host(&self) -> Result<HostData> {
        Ok(self.data()?.as_ref().clone())
    }

    pub fn is_donated(&self) -> bool {
        self.0.data.read().is_none()
    }

    /// Moves the storage out for reuse as an output buffer.
    pub(crate) fn take_for_donation(&self) -> Result<HostData> {
        let taken = self.0.data.write().take().ok_or(Error::UseAfterDonation(self.0.id.0))?;
        Ok(Arc::try_unwrap(taken).unwrap_or_else(|shared| HostData::clone(&shared)))
    }
}

impl fmt::Debug for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Buffer({} {} on {}{})",
            self.id(),
            self.shape(),
            self.device(),
            if self.is_donated() { ", donated" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_round_trip() {
        let values: Vec<f32> = (0..24).map(|v| v as f32 * 0.5).collect();
        let b = Buffer::from_host(values.clone().into(), &[2, 3, 4], Device(0)).unwrap();
        assert_eq!(b.read_to_host().unwrap(), HostData::F32(values));
        assert_eq!(b.shape(), &Shape::f32([2, 3, 4]));
    }

    #[test]
    fn length_mismatch() {
        let err = Buffer::from_host(vec![1.0f32, 2.0, 3.0].into(), &[2, 2], Device(0)).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { expected: 4, got: 3, .. }));
    }

    #[test]
    fn ids_are_unique() {
        let a = Buffer::from_host(vec![1i64].into(), &[1], Device(0)).unwrap();
        let b = Buffer::from_host(vec![1i64].into(), &[1], Device(0)).unwrap();
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn read_after_donation_fails() {
        let a = Buffer::from_host(vec![1.0f32, 2.0].into(), &[2], Device(0)).unwrap();
        let keep = a.clone();
        assert_eq!(a.take_for_donation().unwrap(), HostData::F32(vec![1.0, 2.0]));
        assert_eq!(keep.read_to_host(), Err(Error::UseAfterDonation(a.id().0)));
        assert!(keep.take_for_donation().is_err());
    }

    #[test]
    fn shared_storage_survives_donation() {
        let a = Buffer::from_host(vec![1.0f32, 2.0].into(), &[2], Device(0)).unwrap();
        let b = a.share().unwrap();
        assert_ne!(a.id(), b.id());
        assert_eq!(b.take_for_donation().unwrap(), HostData::F32(vec![1.0, 2.0]));
        assert_eq!(a.read_to_host().unwrap(), HostData::F32(vec![1.0, 2.0]));
    }

    #[test]
    fn signed_zero_folding() {
        let a = HostData::F32(vec![0.0, -1.0]);
        let b = HostData::F32(vec![-0.0, -1.0]);
        assert_ne!(a.as_f32().unwrap()[0].to_bits(), b.as_f32().unwrap()[0].to_bits());
        assert!(a.same_values(&b));
        assert_eq!(a.checksum(), b.checksum());
        assert!(!a.same_values(&HostData::F32(vec![0.0, 1.0])));
        let nan = HostData::F32(vec![f32::NAN]);
        assert!(nan.same_values(&nan.clone()));
    }
}
