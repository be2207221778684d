//! Server assembly, start-up and graceful shutdown.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use dtds_core::assets::{AssetError, AssetRepository, DEFAULT_MAX_BYTES};
use dtds_core::federation::RegistrationRegistry;
use dtds_core::notify::SubscriptionRegistry;
use dtds_core::store::{ContextStore, StoreError};
use thiserror::Error;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::api;
use crate::dispatch::{DispatchConfig, Dispatcher};
use crate::federate::Federator;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    /// Holds `journal.ndjson` and the `assets/` tree.
    pub data_dir: PathBuf,
    pub max_asset_bytes: u64,
    pub dispatch: DispatchConfig,
    pub shutdown_grace: Duration,
    /// Budget for all context snapshots of one resolution.
    pub snapshot_budget: Duration,
    /// Per-source cap inside the snapshot budget.
    pub snapshot_source_cap: Duration,
    /// Upper bound on any forwarded read.
    pub federation_cap: Duration,
}

impl ServerConfig {
    pub fn new(bind: SocketAddr, data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            bind,
            data_dir: data_dir.into(),
            max_asset_bytes: DEFAULT_MAX_BYTES,
            dispatch: DispatchConfig::default(),
            shutdown_grace: Duration::from_secs(5),
            snapshot_budget: Duration::from_millis(500),
            snapshot_source_cap: Duration::from_millis(250),
            federation_cap: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: std::io::Error },
    #[error("context store: {0}")]
    Store(#[from] StoreError),
    #[error("asset repository: {0}")]
    Assets(#[from] AssetError),
}

pub struct AppState {
    pub store: Arc<ContextStore>,
    pub dispatcher: Arc<Dispatcher>,
    pub federator: Federator,
    pub assets: AssetRepository,
    pub config: ServerConfig,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests, drains delivery queues within the grace
    /// period and flushes the journal.
    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let grace = self.state.config.shutdown_grace;
        if tokio::time::timeout(grace, &mut self.task).await.is_err() {
            self.task.abort();
        }
        self.state.dispatcher.shutdown(grace).await;
        if let Err(e) = self.state.store.flush() {
            tracing::error!("journal flush failed: {e}");
        }
    }

    /// Resolves when the server stops on its own.
    pub async fn wait(&mut self) -> std::io::Result<()> {
        match (&mut self.task).await {
            Ok(r) => r,
            Err(e) => Err(std::io::Error::other(e)),
        }
    }
}

pub async fn start(config: ServerConfig) -> Result<ServerHandle, ServerError> {
    std::fs::create_dir_all(&config.data_dir).map_err(StoreError::Journal)?;
    let store = Arc::new(ContextStore::open(&config.data_dir.join("journal.ndjson"))?);
    let assets = AssetRepository::open_with_limit(config.data_dir.join("assets"), config.max_asset_bytes)?;
    let dispatcher = Arc::new(Dispatcher::new(
        Arc::new(SubscriptionRegistry::new()),
        config.dispatch.clone(),
    ));
    store.add_listener(dispatcher.clone());
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServerError::BindFailure {
            addr: config.bind,
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| ServerError::BindFailure {
        addr: config.bind,
        source,
    })?;
    let state = Arc::new(AppState {
        store,
        dispatcher,
        federator: Federator::new(Arc::new(RegistrationRegistry::new())),
        assets,
        config,
    });
    let app = api::router(state.clone());
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await
    });
    tracing::info!("listening on {addr}");
    Ok(ServerHandle {
        addr,
        state,
        stop: Some(stop_tx),
        task,
    })
}
