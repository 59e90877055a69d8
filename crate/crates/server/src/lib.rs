//! HTTP backend for the relevance viewer.
//!
//! The catalog (dataset, models, rule configuration) is loaded once and
//! shared read-only between handlers. Relevance maps are computed on first
//! request and kept in a bounded LRU cache; all routes live under `/api`.

mod api;
pub mod cache;
pub mod catalog;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::Router;

pub use api::{
    ClustersResponse, ModelInfo, Participant, PredictionResponse, RelevanceRequest,
    RelevanceResponse, SLICE_AXIS_HEADER, SLICE_HEIGHT_HEADER, SLICE_WIDTH_HEADER,
};
pub use catalog::{Catalog, CatalogConfig, CatalogModel, ModelConfig, DEFAULT_CACHE_CAPACITY};

pub const CATALOG_ENV: &str = "RELEVIS_CATALOG";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("bad catalog: {0}")]
    Catalog(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// The full route table over a loaded catalog.
pub fn router(catalog: Catalog) -> Router {
    let static_dir = catalog.static_dir.clone();
    let app = api::routes(Arc::new(api::AppState::new(catalog)));
    match static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

/// Loads the catalog and serves until interrupted.
pub async fn serve(catalog_path: &Path, addr: SocketAddr) -> Result<(), ServeError> {
    let catalog = Catalog::load(catalog_path)?;
    tracing::info!(
        subjects = catalog.cohort.subjects.len(),
        models = catalog.models.len(),
        dims = %catalog.dims(),
        "catalog loaded"
    );
    let app = router(catalog);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
