//! Loader thread for real-async execution: parameter copies are produced
//! concurrently with compute and handed over a channel, so the compute
//! side installs them only at sample boundaries. Given the same commit
//! schedule this must produce outputs identical to virtual-time mode,
//! which the integration tests check bit for bit.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use super::ParameterWarehouse;
use crate::moe::ExpertParams;

pub(crate) struct LoadRequest {
    pub layer: usize,
    pub expert_index: usize,
}

pub(crate) struct LoadedExpert {
    pub layer: usize,
    pub expert_index: usize,
    pub params: ExpertParams,
}

/// Owns the loader thread; dropping it closes the request channel and
/// joins the thread.
pub struct AsyncLoader {
    requests: Option<mpsc::Sender<LoadRequest>>,
    completed: mpsc::Receiver<LoadedExpert>,
    handle: Option<JoinHandle<()>>,
}

impl AsyncLoader {
    pub fn spawn(warehouse: Arc<ParameterWarehouse>) -> Self {
        let (req_tx, req_rx) = mpsc::channel::<LoadRequest>();
        let (done_tx, done_rx) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            while let Ok(req) = req_rx.recv() {
                let params = warehouse.expert(req.layer, req.expert_index).clone();
                let done = LoadedExpert {
                    layer: req.layer,
                    expert_index: req.expert_index,
                    params,
                };
                if done_tx.send(done).is_err() {
                    break;
                }
            }
        });
        AsyncLoader {
            requests: Some(req_tx),
            completed: done_rx,
            handle: Some(handle),
        }
    }

    pub(crate) fn request(&self, layer: usize, expert_index: usize) {
        self.requests
            .as_ref()
            .expect("loader already shut down")
            .send(LoadRequest {
                layer,
                expert_index,
            })
            .expect("loader thread exited early");
    }

    /// Block until one requested expert arrives. Arrival order matches
    /// request order.
    pub(crate) fn recv(&self) -> LoadedExpert {
        self.completed.recv().expect("loader thread exited early")
    }
}

impl Drop for AsyncLoader {
    fn drop(&mut self) {
        self.requests.take();
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}
