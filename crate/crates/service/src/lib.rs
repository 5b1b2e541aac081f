//! Review and orchestration service: pipeline jobs, the duplicate review
//! queue with a durable verdict log, leakage reports, and dataset and
//! image downloads.

pub mod api;
pub mod config;
pub mod jobs;
pub mod pipeline;
pub mod store;

use std::future::Future;
use std::sync::{Arc, RwLock};

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use store::{SplitsFile, VerdictStore};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Jobs(#[from] jobs::JobError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AppState {
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ServeError> {
        let store = Arc::new(RwLock::new(VerdictStore::open(&cfg.store, cfg.snapshot_every)?));
        let jobs = jobs::JobManager::open(&cfg.store, cfg.workers, store.clone())?;
        Ok(Self {
            store,
            jobs,
            dir: cfg.store.clone(),
        })
    }
}

/// Serves until `shutdown` resolves. `on_bound` gets the bound address,
/// which matters when the configured port is 0.
pub async fn serve(
    cfg: ServiceConfig,
    on_bound: impl FnOnce(std::net::SocketAddr),
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let state = AppState::open(&cfg)?;
    let listener = tokio::net::TcpListener::bind(&cfg.addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    state.store.write().unwrap().snapshot()?;
    Ok(())
}
