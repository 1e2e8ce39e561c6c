//! HTTP routes over [`codelkt::service::Service`].
//!
//! Service calls block (disk sync, LLM requests), so each runs on the
//! blocking pool.

use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use codelkt::service::{CreateSessionRequest, Service, ServiceError, SubmitRequest};

/// Error body of every failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: serde_json::Value,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), detail: serde_json::Value::Null } }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let detail = match &e {
            ServiceError::WrongProblem { expected, got } => serde_json::json!({ "expected": expected, "got": got }),
            ServiceError::SessionNotFound(id) => serde_json::json!({ "session_id": id }),
            _ => serde_json::Value::Null,
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        Self { status, body: ErrorBody { code: e.code().into(), message: e.to_string(), detail } }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    service: Arc<Service>,
    static_dir: Option<Arc<PathBuf>>,
}

async fn blocking<T, F>(state: &AppState, f: F) -> Result<Json<T>, ApiError>
where
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    let service = state.service.clone();
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))?
        .map(Json)
        .map_err(ApiError::from)
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let created = blocking(&state, move |s| s.create_session(&req)).await?;
    Ok((StatusCode::CREATED, created))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    blocking(&state, move |s| s.get_session(&id)).await
}

async fn hint(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    blocking(&state, move |s| s.request_hint(&id)).await
}

async fn submit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(mut req) = body?;
    if req.idempotency_key.is_none() {
        req.idempotency_key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_string);
    }
    blocking(&state, move |s| s.submit(&id, &req)).await
}

async fn history(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    blocking(&state, move |s| s.history(&id)).await
}

async fn problems(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.service.bank().views())
}

async fn health() -> &'static str {
    "ok"
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn static_asset(State(state): State<AppState>, path: Option<Path<String>>) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such asset");
    let root = state.static_dir.as_ref().ok_or_else(not_found)?;
    let rel = PathBuf::from(path.map(|Path(p)| p).unwrap_or_default());
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(not_found());
    }
    let mut file = root.join(&rel);
    if file.is_dir() || rel.as_os_str().is_empty() {
        file = file.join("index.html");
    }
    let bytes = tokio::fs::read(&file).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type(&file))], bytes).into_response())
}

/// Routes of the tutoring API. `static_dir`, when given, is served under `/app`.
pub fn router(service: Arc<Service>, static_dir: Option<PathBuf>) -> Router {
    let state = AppState { service, static_dir: static_dir.map(Arc::new) };
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/hint", post(hint))
        .route("/sessions/{id}/submit", post(submit))
        .route("/sessions/{id}/history", get(history))
        .route("/problems", get(problems))
        .route("/health", get(health))
        .route("/app", get(static_asset))
        .route("/app/", get(static_asset))
        .route("/app/{*path}", get(static_asset))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(service: Arc<Service>, static_dir: Option<PathBuf>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(service, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
