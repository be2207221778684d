//! The live demo loop: a GPS trace replayed over MQTT, a sampler bridging
//! fixes into the store, a traffic simulator driving virtual vehicles around
//! the real one, and a watcher printing what a scene client would see.
//!
//! The four parts talk only through the broker and the HTTP API.

pub mod fixtures;
pub mod histogram;
pub mod replay;
pub mod sampler;
pub mod scenario;
pub mod simulator;
pub mod watcher;

use tokio::sync::watch;

/// Cooperative stop flag shared by the long-running loops.
#[derive(Clone)]
pub struct StopSignal(watch::Receiver<bool>);

pub struct StopHandle(watch::Sender<bool>);

pub fn stop_pair() -> (StopHandle, StopSignal) {
    let (tx, rx) = watch::channel(false);
    (StopHandle(tx), StopSignal(rx))
}

impl StopHandle {
    pub fn stop(&self) {
        self.0.send_replace(true);
    }
}

impl StopSignal {
    /// A signal that never fires.
    pub fn never() -> Self {
        let (tx, rx) = watch::channel(false);
        std::mem::forget(tx);
        StopSignal(rx)
    }

    pub fn is_stopped(&self) -> bool {
        *self.0.borrow()
    }

    pub async fn stopped(&mut self) {
        let _ = self.0.wait_for(|s| *s).await;
    }
}
