//! HTTP front of [`SessionStore`]. JSON in, JSON out.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use modsel::policy::PolicyParams;
use modsel::session::{ApplyRequest, CreateRequest, SessionStore};
use modsel::Error;
use serde::Serialize;

pub type Store = SessionStore<PolicyParams>;

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
}

pub struct ApiError(pub Error);

pub fn status_for(err: &Error) -> (StatusCode, &'static str) {
    match err {
        Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        Error::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
        Error::State(_) => (StatusCode::CONFLICT, "state"),
        Error::Busy(_) => (StatusCode::LOCKED, "busy"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = status_for(&self.0);
        let body = ErrorBody {
            error: kind,
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Session work is CPU-bound; keep it off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> modsel::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Ok(Json(v)),
        Ok(Err(e)) => Err(ApiError(e)),
        Err(join) => Err(ApiError(Error::State(format!("worker failed: {join}")))),
    }
}

async fn create(State(store): State<Arc<Store>>, body: Bytes) -> Response {
    let req: CreateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError(Error::Validation(format!("create request: {e}"))).into_response(),
    };
    match blocking(move || store.create(&req)).await {
        Ok(view) => (StatusCode::CREATED, view).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn state(State(store): State<Arc<Store>>, Path(id): Path<String>) -> impl IntoResponse {
    blocking(move || store.get_state(&id)).await
}

async fn recommend(State(store): State<Arc<Store>>, Path(id): Path<String>) -> impl IntoResponse {
    blocking(move || store.recommend(&id)).await
}

async fn apply(State(store): State<Arc<Store>>, Path(id): Path<String>, body: Bytes) -> impl IntoResponse {
    let req = ApplyRequest::from_json(&body).map_err(ApiError)?;
    blocking(move || store.apply(&id, &req)).await
}

async fn undo(State(store): State<Arc<Store>>, Path(id): Path<String>) -> impl IntoResponse {
    blocking(move || store.undo(&id)).await
}

async fn trace(State(store): State<Arc<Store>>, Path(id): Path<String>) -> impl IntoResponse {
    blocking(move || store.trace(&id)).await
}

async fn cases(State(store): State<Arc<Store>>) -> Json<Vec<String>> {
    Json(store.case_ids())
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/cases", get(cases))
        .route("/sessions", post(create))
        .route("/sessions/{id}/state", get(state))
        .route("/sessions/{id}/recommend", get(recommend))
        .route("/sessions/{id}/apply", post(apply))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/trace", get(trace))
        .with_state(store)
}
