use std::sync::mpsc;
use std::thread::JoinHandle;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::ir::Device;

type Job = Box<dyn FnOnce() + Send>;

/// One background thread per device running submitted work in order.
pub(crate) struct Executor {
    device: Device,
    tx: Mutex<Option<mpsc::Sender<Job>>>,
    handle: Mutex<Option<JoinHandle<()>>>,
}

impl Executor {
    pub(crate) fn spawn(device: Device) -> Executor {
        let (tx, rx) = mpsc::channel::<Job>();
        let handle = std::thread::Builder::new()
            .name(format!("lt-exec-{}", device.0))
            .spawn(move || {
                for job in rx {
                    job();
                }
            })
            .expect("spawn executor thread");
        Executor { device, tx: Mutex::new(Some(tx)), handle: Mutex::new(Some(handle)) }
    }

    pub(crate) fn submit(&self, job: impl FnOnce() + Send + 'static) -> Result<()> {
        let tx = self.tx.lock();
        let tx = tx.as_ref().ok_or(Error::ExecutorGone(self.device))?;
        tx.send(Box::new(job)).map_err(|_| Error::ExecutorGone(self.device))
    }

    /// Blocks until everything submitted so far has run.
    pub(crate) fn flush(&self) -> Result<()> {
        let (done_tx, done_rx) = mpsc::channel();
        self.submit(move || {
            let _ = done_tx.send(());
        })?;
        done_rx.recv().map_err(|_| Error::ExecutorGone(self.device))
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.tx.lock().take();
        if let Some(h) = self.handle.lock().take() {
            let _ = h.join();
        }
    }
}
