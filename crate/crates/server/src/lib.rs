//! HTTP and websocket surface of the question-bank service.

pub mod auth;
pub mod config;
pub mod error;
pub mod routes;
pub mod ws;

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::http::{HeaderName, Request};
use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;
use tower_http::compression::predicate::{NotForContentType, Predicate, SizeAbove};
use tower_http::compression::CompressionLayer;
use tower_http::request_id::{MakeRequestUuid, PropagateRequestIdLayer, SetRequestIdLayer};
use tower_http::trace::TraceLayer;

use juvenotes_core::pipeline::Pipeline;
use juvenotes_core::store::Store;
use juvenotes_core::upload::UploadManager;
use juvenotes_core::{Error, Result};

pub use auth::{Principal, TokenTable};
pub use config::Settings;

pub const REQUEST_ID_HEADER: &str = "x-request-id";

/// Responses at or above this many bytes are compressed when the client
/// accepts it.
pub const COMPRESS_ABOVE: u64 = 1024;

pub struct AppState {
    pub store: Arc<Store>,
    pub pipeline: Arc<Pipeline>,
    pub uploads: Arc<UploadManager>,
    pub tokens: TokenTable,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, uploads: UploadManager, tokens: TokenTable) -> Arc<Self> {
        Arc::new(Self { store: Arc::clone(pipeline.store()), pipeline, uploads: Arc::new(uploads), tokens })
    }

    /// Opens the store and providers named by `settings`.
    pub fn from_settings(settings: &Settings) -> Result<Arc<Self>> {
        let tokens = match &settings.auth_tokens_file {
            Some(path) => TokenTable::load(path)?,
            None => return Err(Error::Config("AUTH_TOKENS_FILE is not set".into())),
        };
        let store = Arc::new(settings.open_store()?);
        let pipeline = Arc::new(settings.pipeline(store)?);
        let uploads = UploadManager::new(Arc::clone(&pipeline), settings.upload);
        Ok(Self::new(pipeline, uploads, tokens))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let request_id = HeaderName::from_static(REQUEST_ID_HEADER);
    let compress = SizeAbove::new(COMPRESS_ABOVE).and(NotForContentType::GRPC).and(NotForContentType::IMAGES);
    Router::new()
        .route("/health", get(routes::health))
        .route("/ws", get(ws::upgrade))
        .route("/papers/{id}/questions", get(routes::paper_questions))
        .route("/courses", get(routes::courses))
        .route("/questions/{id}/responses", post(routes::respond))
        .route("/questions/{id}/feedback", post(routes::feedback))
        .route("/questions/{id}/flags", post(routes::raise_flag))
        .route("/questions/{id}/publish", post(routes::publish))
        .route("/flags", get(routes::open_flags))
        .route("/flags/{id}/resolve", post(routes::resolve_flag))
        .route("/jobs/{id}", get(routes::job))
        .route("/analytics/dau", get(routes::dau))
        .route("/analytics/processing", get(routes::processing))
        .route("/analytics/satisfaction", get(routes::satisfaction))
        .route("/sync/push", post(routes::sync_push))
        .route("/sync/pull", get(routes::sync_pull))
        .fallback(routes::not_found)
        .with_state(state)
        .layer(CompressionLayer::new().compress_when(compress))
        .layer(
            TraceLayer::new_for_http().make_span_with(|req: &Request<_>| {
                let id = req.headers().get(REQUEST_ID_HEADER).and_then(|v| v.to_str().ok()).unwrap_or("-");
                tracing::info_span!("request", method = %req.method(), path = %req.uri().path(), request_id = %id)
            }),
        )
        .layer(PropagateRequestIdLayer::new(request_id.clone()))
        .layer(SetRequestIdLayer::new(request_id, MakeRequestUuid))
}

/// Serves until `shutdown` resolves, with pipeline workers running
/// alongside and stale upload sessions purged periodically.
pub async fn serve(listener: TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let workers = state.pipeline.start_workers();
    let uploads = Arc::clone(&state.uploads);
    let purge = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(600));
        loop {
            tick.tick().await;
            let purged = uploads.purge_expired();
            if purged > 0 {
                tracing::info!(purged, "expired upload sessions removed");
            }
        }
    });
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    purge.abort();
    tokio::task::spawn_blocking(move || workers.shutdown()).await.ok();
    result.map_err(Error::Io)
}

/// Binds `settings.bind_addr` and serves until Ctrl-C.
pub async fn run(settings: &Settings) -> Result<()> {
    let state = AppState::from_settings(settings)?;
    let listener = TcpListener::bind(settings.bind_addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
