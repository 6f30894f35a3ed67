//! JSON API and static UI route for the annotation store.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AnnotationError, AnnotationStore, ExportOptions, Verdict};
use crate::corpus::SourceRecord;
use crate::taxonomy::Taxonomy;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<AnnotationStore>,
    pub taxonomy: Arc<Taxonomy>,
    /// Directory served under `/ui`.
    pub ui_dir: Option<PathBuf>,
    /// Export paths are resolved inside this directory.
    pub export_dir: PathBuf,
    /// Positive pool used when an export asks for balancing.
    pub positives: Arc<Vec<SourceRecord>>,
    /// Shared bearer token; `None` disables auth.
    pub token: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        use AnnotationError as E;
        let (status, code) = match &e {
            E::UnknownAnnotator(_) => (StatusCode::FORBIDDEN, "unknown_annotator"),
            E::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            E::VersionConflict { .. } => (StatusCode::CONFLICT, "version_conflict"),
            E::DuplicateJudgment { .. } => (StatusCode::CONFLICT, "duplicate_judgment"),
            E::LeaseHeld { .. } => (StatusCode::CONFLICT, "lease_held"),
            E::InvalidState { .. } => (StatusCode::CONFLICT, "invalid_state"),
            E::SpanNotInOutput => (StatusCode::UNPROCESSABLE_ENTITY, "span_not_in_output"),
            E::PendingItemsRemain(_) => (StatusCode::CONFLICT, "pending_items_remain"),
            E::Corpus(crate::corpus::CorpusError::InsufficientPositives { .. }) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_positives")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Deserialize)]
struct JudgmentBody {
    annotator: String,
    verdict: Verdict,
    #[serde(default)]
    notes: String,
    version: u64,
}

#[derive(Deserialize)]
struct EditBody {
    #[serde(alias = "annotator")]
    editor: String,
    new_output: String,
    new_span: String,
    version: u64,
}

#[derive(Deserialize)]
struct DropBody {
    #[serde(alias = "annotator")]
    by: String,
    version: u64,
}

#[derive(Deserialize)]
struct ExportBody {
    path: String,
    #[serde(default)]
    balance: bool,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    force: bool,
}

#[derive(Serialize)]
struct UiConfig<'a> {
    api_base: &'static str,
    annotators: Vec<&'a str>,
    lease_minutes: i64,
    tie_breaker: bool,
    auth_required: bool,
    show_provenance: bool,
}

async fn next_item(State(s): State<AppState>, Query(q): Query<NextQuery>) -> ApiResult<serde_json::Value> {
    let item = s.store.next_item(&q.annotator)?;
    Ok(Json(json!({ "item": item })))
}

async fn get_item(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<super::AnnotationItem> {
    s.store
        .item(&id)
        .map(Json)
        .ok_or_else(|| AnnotationError::UnknownItem(id).into())
}

async fn judgment(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<JudgmentBody>, JsonRejection>,
) -> ApiResult<super::AnnotationItem> {
    let Json(b) = body?;
    Ok(Json(s.store.submit_judgment(&id, &b.annotator, b.verdict, &b.notes, b.version)?))
}

async fn edit(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<EditBody>, JsonRejection>,
) -> ApiResult<super::AnnotationItem> {
    let Json(b) = body?;
    Ok(Json(s.store.edit_item(&id, &b.editor, &b.new_output, &b.new_span, b.version)?))
}

async fn drop_item(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<DropBody>, JsonRejection>,
) -> ApiResult<super::AnnotationItem> {
    let Json(b) = body?;
    Ok(Json(s.store.drop_item(&id, &b.by, b.version)?))
}

async fn stats(State(s): State<AppState>) -> Json<super::AgreementStats> {
    Json(s.store.stats())
}

/// Resolves a client-supplied relative path inside `root`.
fn confine(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if rel.as_os_str().is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

async fn export(State(s): State<AppState>, body: Result<Json<ExportBody>, JsonRejection>) -> ApiResult<super::ExportSummary> {
    let Json(b) = body?;
    let path = confine(&s.export_dir, &b.path).ok_or_else(|| {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_path", "export path must be relative and stay inside the export directory")
    })?;
    let opts = ExportOptions {
        force: b.force,
        balance: b.balance.then(|| (s.positives.as_ref().clone(), b.seed)),
    };
    Ok(Json(s.store.export(&path, &opts)?))
}

async fn taxonomy(State(s): State<AppState>) -> Json<serde_json::Value> {
    let types: Vec<_> = s.taxonomy.entries().collect();
    Json(json!({
        "general_criteria": s.taxonomy.general_criteria(),
        "types": types,
    }))
}

async fn config(State(s): State<AppState>) -> Json<serde_json::Value> {
    let cfg = s.store.config();
    Json(json!(UiConfig {
        api_base: "/api",
        annotators: cfg.annotators.iter().map(String::as_str).collect(),
        lease_minutes: cfg.lease.num_minutes(),
        tie_breaker: cfg.tie_breaker,
        auth_required: s.token.is_some(),
        show_provenance: false,
    }))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "map" => "application/json",
        _ => "application/octet-stream",
    }
}

async fn serve_ui_file(s: &AppState, rel: &str) -> Response {
    let Some(dir) = &s.ui_dir else {
        return ApiError::new(StatusCode::NOT_FOUND, "ui_not_configured", "no UI directory configured").into_response();
    };
    let rel = if rel.is_empty() || rel.ends_with('/') {
        format!("{rel}index.html")
    } else {
        rel.to_string()
    };
    let Some(path) = confine(dir, &rel) else {
        return ApiError::new(StatusCode::BAD_REQUEST, "bad_path", "invalid asset path").into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no asset {rel}")).into_response(),
    }
}

async fn ui_index(State(s): State<AppState>) -> Response {
    serve_ui_file(&s, "").await
}

async fn ui_asset(State(s): State<AppState>, UrlPath(rel): UrlPath<String>) -> Response {
    serve_ui_file(&s, &rel).await
}

async fn require_token(State(s): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let ok = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|given| given == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/items/next", get(next_item))
        .route("/api/items/{id}", get(get_item))
        .route("/api/items/{id}/judgment", post(judgment))
        .route("/api/items/{id}/edit", post(edit))
        .route("/api/items/{id}/drop", post(drop_item))
        .route("/api/stats", get(stats))
        .route("/api/export", post(export))
        .route("/api/taxonomy", get(taxonomy))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .merge(api)
        .route("/api/config", get(config))
        .route("/ui", get(ui_index))
        .route("/ui/", get(ui_index))
        .route("/ui/{*path}", get(ui_asset))
        .with_state(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confine_rejects_escapes() {
        let root = Path::new("/srv/out");
        assert_eq!(confine(root, "a/b.jsonl"), Some(PathBuf::from("/srv/out/a/b.jsonl")));
        assert!(confine(root, "../x").is_none());
        assert!(confine(root, "/etc/passwd").is_none());
        assert!(confine(root, "").is_none());
        assert!(confine(root, "./x").is_none());
    }
}
