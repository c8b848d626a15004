//! Read-only HTTP JSON API over a registry of trained models.
//!
//! Endpoints: `GET /health`, `GET /models`, `POST /predict`, `POST /explain`
//! and `POST /whatif`. Errors are `{"error": code, "detail": message}`.

pub mod api;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use gradecast::models::Registry;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{ApiError, ApiResult};

type Shared = Arc<Registry>;

/// Builds the router over an immutable registry.
pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/predict", post(predict))
        .route("/explain", post(explain))
        .route("/whatif", post(whatif))
        .fallback(not_found)
        .with_state(registry)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(registry: Arc<Registry>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn json_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(body) => (status, [(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(e) => error_response(ApiError::new(500, "internal", e.to_string())),
    }
}

fn error_response(e: ApiError) -> Response {
    let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    json_response(status, &e)
}

fn respond<T: Serialize>(result: ApiResult<T>) -> Response {
    match result {
        Ok(v) => json_response(StatusCode::OK, &v),
        Err(e) => error_response(e),
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable("malformed_request", e.to_string()))
}

async fn health(State(registry): State<Shared>) -> Response {
    json_response(StatusCode::OK, &api::health(&registry))
}

async fn models(State(registry): State<Shared>) -> Response {
    json_response(StatusCode::OK, &api::models(&registry))
}

async fn predict(State(registry): State<Shared>, body: Bytes) -> Response {
    respond(parse_body(&body).and_then(|req| api::predict(&registry, &req)))
}

async fn explain(State(registry): State<Shared>, body: Bytes) -> Response {
    respond(parse_body(&body).and_then(|req| api::explain(&registry, &req)))
}

async fn whatif(State(registry): State<Shared>, body: Bytes) -> Response {
    respond(parse_body(&body).and_then(|req| api::whatif(&registry, &req)))
}

async fn not_found() -> Response {
    error_response(ApiError::new(404, "not_found", "no such endpoint"))
}
