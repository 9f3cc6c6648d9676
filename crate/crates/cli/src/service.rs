//! HTTP endpoints:
//!
//! * `POST /clean`: image body in, cleaned PNG out.
//! * `POST /retrieve`: multipart `image` (+ optional `k`), JSON hits out.
//! * `GET /health`: model and index status.
//! * `GET /items/{id}/thumbnail`: the indexed item's clean PNG.
//!
//! Errors are JSON `{"code", "message"}`. Heavy work runs on the blocking
//! pool behind a semaphore; a request that cannot finish within the
//! configured timeout gets a 503.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use sketchclean::model::Network;
use sketchclean::retrieval::{Hit, RetrievalIndex};
use tokio::sync::Semaphore;

use crate::pipeline;

pub const DEFAULT_K: usize = 10;

/// Everything a request may read. Built once at startup and never mutated.
pub struct ServiceState {
    pub net: Option<Arc<Network>>,
    pub index: Option<Arc<RetrievalIndex>>,
    /// Dataset directory holding `clean/<id>.png` thumbnails.
    pub dataset: Option<PathBuf>,
    pub timeout: Duration,
    permits: Arc<Semaphore>,
}

impl ServiceState {
    pub fn new(
        net: Option<Network>,
        index: Option<RetrievalIndex>,
        dataset: Option<PathBuf>,
        timeout: Duration,
    ) -> Self {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self {
            net: net.map(Arc::new),
            index: index.map(Arc::new),
            dataset,
            timeout,
            permits: Arc::new(Semaphore::new(workers)),
        }
    }

    async fn run<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce() -> sketchclean::Result<T> + Send + 'static,
    {
        let permits = self.permits.clone();
        let work = async move {
            let permit = permits.acquire_owned().await.expect("semaphore is never closed");
            tokio::task::spawn_blocking(move || {
                let _permit = permit;
                f()
            })
            .await
        };
        match tokio::time::timeout(self.timeout, work).await {
            Err(_) => Err(ApiError::unavailable("request timed out")),
            Ok(Err(e)) => Err(ApiError::internal(e.to_string())),
            Ok(Ok(Err(e))) if e.is_usage() => Err(ApiError::bad_request(e.to_string())),
            Ok(Ok(Err(e))) => Err(ApiError::internal(e.to_string())),
            Ok(Ok(Ok(v))) => Ok(v),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(m: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "bad_request", message: m.into() }
    }

    fn unavailable(m: impl Into<String>) -> Self {
        Self { status: StatusCode::SERVICE_UNAVAILABLE, code: "unavailable", message: m.into() }
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, code: "not_found", message: m.into() }
    }

    fn internal(m: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", message: m.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::warn!("{}: {}", self.code, self.message);
        }
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/clean", post(clean))
        .route("/retrieve", post(retrieve))
        .route("/health", get(health))
        .route("/items/{id}/thumbnail", get(thumbnail))
        .with_state(Arc::new(state))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn clean(State(s): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let net = s.net.clone().ok_or_else(|| ApiError::unavailable("model not loaded"))?;
    if body.is_empty() {
        return Err(ApiError::bad_request("empty image payload"));
    }
    let out = s.run(move || pipeline::clean_png(&net, &body)).await?;
    Ok(png(out))
}

async fn retrieve(
    State(s): State<Arc<ServiceState>>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Json<Vec<Hit>>, ApiError> {
    let index = s.index.clone().ok_or_else(|| ApiError::unavailable("index not loaded"))?;
    let net = s.net.clone().ok_or_else(|| ApiError::unavailable("model not loaded"))?;
    let mut multipart = multipart.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let (mut image, mut k) = (None, DEFAULT_K);
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?
    {
        match field.name() {
            Some("image") => {
                image = Some(field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?)
            }
            Some("k") => {
                let text = field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                k = text
                    .trim()
                    .parse()
                    .map_err(|_| ApiError::bad_request(format!("k must be a positive integer, got {text:?}")))?;
            }
            _ => {}
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing multipart field `image`"))?;
    if k == 0 || k > index.len() {
        return Err(ApiError::bad_request(format!("k must be in 1..={}, got {k}", index.len())));
    }
    let hits = s
        .run(move || pipeline::retrieve(Some(&net), &index, &image, k))
        .await?;
    Ok(Json(hits))
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    model_loaded: bool,
    index_loaded: bool,
    index_items: usize,
    input_size: Option<usize>,
    output_size: Option<usize>,
}

async fn health(State(s): State<Arc<ServiceState>>) -> Json<Health> {
    Json(Health {
        status: "ok",
        model_loaded: s.net.is_some(),
        index_loaded: s.index.is_some(),
        index_items: s.index.as_ref().map_or(0, |i| i.len()),
        input_size: s.net.as_ref().map(|n| n.config().input_size),
        output_size: s.net.as_ref().map(|n| n.config().output_size()),
    })
}

async fn thumbnail(
    State(s): State<Arc<ServiceState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let index = s.index.as_ref().ok_or_else(|| ApiError::unavailable("index not loaded"))?;
    let dir = s.dataset.as_ref().ok_or_else(|| ApiError::unavailable("no dataset configured"))?;
    if index.get(&id).is_none() {
        return Err(ApiError::not_found(format!("no item {id:?}")));
    }
    let path = dir.join("clean").join(format!("{id}.png"));
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(png(bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ApiError::not_found(format!("no thumbnail for {id:?}")))
        }
        Err(e) => Err(ApiError::internal(format!("{}: {e}", path.display()))),
    }
}

/// Binds `host:port` and serves until interrupted.
pub async fn serve(state: ServiceState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
