use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

use crate::eager::Buffer;
use crate::error::Result;

/// A buffer that may still be under computation. Readers block until the
/// executor publishes either the buffer or the error that prevented it.
pub(crate) struct Slot {
    id: u64,
    value: Mutex<Option<Result<Buffer>>>,
    ready: Condvar,
}

impl Slot {
    fn with(value: Option<Result<Buffer>>) -> Arc<Slot> {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        Arc::new(Slot { id: NEXT.fetch_add(1, Ordering::Relaxed), value: Mutex::new(value), ready: Condvar::new() })
    }

    pub(crate) fn pending() -> Arc<Slot> {
        Slot::with(None)
    }

    pub(crate) fn ready(buf: Buffer) -> Arc<Slot> {
        Slot::with(Some(Ok(buf)))
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub(crate) fn fill(&self, value: Result<Buffer>) {
        let mut guard = self.value.lock();
        debug_assert!(guard.is_none(), "slot filled twice");
        *guard = Some(value);
        self.ready.notify_all();
    }

    pub(crate) fn wait(&self) -> Result<Buffer> {
        let mut guard = self.value.lock();
        while guard.is_none() {
            self.ready.wait(&mut guard);
        }
        guard.as_ref().expect("filled").clone()
    }

    #[cfg(test)]
    pub(crate) fn is_ready(&self) -> bool {
        self.value.lock().is_some()
    }
}
