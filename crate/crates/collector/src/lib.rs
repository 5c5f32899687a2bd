//! Durable HTTP service collecting odd-one-out judgments, grid ratings and
//! grid labels into the corpus format read by `oddity-core`.

pub mod error;
pub mod routes;
pub mod service;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

pub use error::{CollectorError, ErrorBody, Result};
pub use routes::router;
pub use service::{Collector, CollectorConfig, Consent, Demographics, NextTask, Task, TaskKind, TaskPayload};

/// Serves until ctrl-c. Every acknowledged write is already on disk, so
/// shutdown needs no flush.
pub async fn serve(config: CollectorConfig, addr: SocketAddr) -> Result<()> {
    let collector = Arc::new(tokio::task::spawn_blocking(move || Collector::open(config)).await.map_err(CollectorError::storage)??);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(CollectorError::storage)?;
    let local = listener.local_addr().map_err(CollectorError::storage)?;
    eprintln!("collector listening on http://{local}");
    axum::serve(listener, router(collector))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(CollectorError::storage)
}
