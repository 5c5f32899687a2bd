//! JSON-over-HTTP surface. Sessions authenticate with
//! `Authorization: Bearer <token>`; admin calls use `x-admin-token`.

use std::path::{Component, Path as FsPath};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CollectorError, Result};
use crate::service::{Collector, Consent, Demographics, ExportSummary, NextTask, Progress, Registration, TaskKind};

pub const ADMIN_HEADER: &str = "x-admin-token";

/// `Json` whose rejections use the service error body.
pub struct ApiJson<T>(pub T);

impl<T, S> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = CollectorError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(ApiJson(v)),
            Err(e) => Err(json_rejection(e)),
        }
    }
}

fn json_rejection(e: JsonRejection) -> CollectorError {
    CollectorError::Invalid(e.body_text())
}

impl<T: Serialize> IntoResponse for ApiJson<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

pub struct ApiQuery<T>(pub T);

impl<T, S> FromRequestParts<S> for ApiQuery<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = CollectorError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self> {
        axum::extract::Query::<T>::from_request_parts(parts, state)
            .await
            .map(|q| ApiQuery(q.0))
            .map_err(|e: QueryRejection| CollectorError::Invalid(e.body_text()))
    }
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let v = headers.get(AUTHORIZATION)?.to_str().ok()?;
    v.strip_prefix("Bearer ").map(|t| t.trim().to_string())
}

/// Runs a store mutation off the async executor; appends fsync.
async fn blocking<T, F>(c: &Arc<Collector>, f: F) -> Result<T>
where
    T: Send + 'static,
    F: FnOnce(&Collector) -> Result<T> + Send + 'static,
{
    let c = Arc::clone(c);
    tokio::task::spawn_blocking(move || f(&c))
        .await
        .map_err(|e| CollectorError::Storage(format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    #[serde(default)]
    pub demographics: Demographics,
    #[serde(default)]
    pub consent: Consent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NextQuery {
    #[serde(default)]
    pub kind: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgmentRequest {
    /// Screen slot 0-2; `null` is an empty submission.
    pub choice: Option<u8>,
    #[serde(default)]
    pub response_ms: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingRequest {
    pub column_percentile: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsRequest {
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportRequest {
    #[serde(default)]
    pub qc: bool,
    /// Export directory name under `<data_dir>/exports`.
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Accepted {
    pub task_id: String,
    pub accepted: bool,
}

async fn register(State(c): State<Arc<Collector>>, ApiJson(req): ApiJson<RegisterRequest>) -> Result<Response> {
    let reg: Registration = blocking(&c, move |c| c.register(req.demographics, req.consent)).await?;
    Ok((StatusCode::CREATED, ApiJson(reg)).into_response())
}

async fn next_task(
    State(c): State<Arc<Collector>>,
    headers: HeaderMap,
    ApiQuery(q): ApiQuery<NextQuery>,
) -> Result<ApiJson<NextTask>> {
    let kind = match q.kind.as_deref() {
        None => TaskKind::ThreeAfc,
        Some(k) => TaskKind::parse(k)?,
    };
    let token = bearer(&headers);
    blocking(&c, move |c| c.next_task(token.as_deref(), kind)).await.map(ApiJson)
}

async fn submit_judgment(
    State(c): State<Arc<Collector>>,
    headers: HeaderMap,
    Path(task_id): Path<String>,
    ApiJson(req): ApiJson<JudgmentRequest>,
) -> Result<ApiJson<Accepted>> {
    let token = bearer(&headers);
    let id = task_id.clone();
    blocking(&c, move |c| c.submit_judgment(token.as_deref(), &id, req.choice, req.response_ms)).await?;
    Ok(ApiJson(Accepted { task_id, accepted: true }))
}

async fn submit_rating(
    State(c): State<Arc<Collector>>,
    headers: HeaderMap,
    Path(task_id): Path<String>,
    ApiJson(req): ApiJson<RatingRequest>,
) -> Result<ApiJson<Accepted>> {
    let token = bearer(&headers);
    let id = task_id.clone();
    blocking(&c, move |c| c.submit_rating(token.as_deref(), &id, req.column_percentile)).await?;
    Ok(ApiJson(Accepted { task_id, accepted: true }))
}

async fn submit_labels(
    State(c): State<Arc<Collector>>,
    headers: HeaderMap,
    Path(task_id): Path<String>,
    ApiJson(req): ApiJson<LabelsRequest>,
) -> Result<ApiJson<Accepted>> {
    let token = bearer(&headers);
    let id = task_id.clone();
    blocking(&c, move |c| c.submit_labels(token.as_deref(), &id, req.labels)).await?;
    Ok(ApiJson(Accepted { task_id, accepted: true }))
}

async fn progress(State(c): State<Arc<Collector>>, headers: HeaderMap) -> Result<ApiJson<Progress>> {
    let token = bearer(&headers);
    c.progress(token.as_deref()).map(ApiJson)
}

async fn grid(State(c): State<Arc<Collector>>, Path(dim): Path<String>) -> Result<Response> {
    let dim: usize = dim.parse().map_err(|_| CollectorError::Invalid(format!("bad dimension {dim:?}")))?;
    let g = c.grid(dim)?;
    Ok(([(CONTENT_TYPE, "application/json")], g.to_json()).into_response())
}

async fn export(
    State(c): State<Arc<Collector>>,
    headers: HeaderMap,
    ApiJson(req): ApiJson<ExportRequest>,
) -> Result<ApiJson<ExportSummary>> {
    let admin = headers.get(ADMIN_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    c.check_admin(admin.as_deref())?;
    let name = req.name.unwrap_or_else(|| "latest".to_string());
    if !single_component(&name) {
        return Err(CollectorError::Invalid(format!("export name {name:?} must be a plain directory name")));
    }
    let out = c.config().data_dir.join("exports").join(name);
    blocking(&c, move |c| c.export(&out, req.qc)).await.map(ApiJson)
}

fn single_component(name: &str) -> bool {
    let mut parts = FsPath::new(name).components();
    matches!((parts.next(), parts.next()), (Some(Component::Normal(_)), None))
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn image(State(c): State<Arc<Collector>>, Path(id): Path<String>) -> Result<Response> {
    let path = c.image_path(&id)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| CollectorError::NotFound(format!("no image for stimulus {id}")))?;
    Ok(([(CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

async fn fallback() -> CollectorError {
    CollectorError::NotFound("no such endpoint".into())
}

pub fn router(collector: Arc<Collector>) -> Router {
    Router::new()
        .route("/api/annotators", post(register))
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/judgment", post(submit_judgment))
        .route("/api/tasks/{id}/rating", post(submit_rating))
        .route("/api/tasks/{id}/labels", post(submit_labels))
        .route("/api/progress", get(progress))
        .route("/api/grids/{dim}", get(grid))
        .route("/api/admin/export", post(export))
        .route("/img/{id}", get(image))
        .fallback(fallback)
        .with_state(collector)
}
