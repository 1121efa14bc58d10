//! HTTP facade over one tri-plane scene: renders, selection, context-grid round trips,
//! training jobs and edit layers.
//!
//! Every mutating request may carry an `Idempotency-Key` header. A retry with the same
//! key, method, path and body replays the first response instead of acting twice.

pub mod api;
mod error;
mod jobs;
mod routes;
mod state;

use std::hash::{DefaultHasher, Hash, Hasher};
use std::net::SocketAddr;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use error::{ApiError, ErrorBody};
pub use state::{AppState, ServiceConfig};

use state::Cached;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAY_HEADER: &str = "idempotent-replay";
/// Largest request body accepted, enough for an edited 2x2 mosaic of large views.
pub const BODY_LIMIT: usize = 64 << 20;

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_methods(Any)
        .allow_headers(Any)
        .allow_origin(match &state.inner.config.cors_origin {
            Some(origin) => match HeaderValue::from_str(origin) {
                Ok(v) => AllowOrigin::exact(v),
                Err(_) => AllowOrigin::list([]),
            },
            None => AllowOrigin::any(),
        });
    Router::new()
        .route("/scene", get(routes::scene))
        .route("/render", post(routes::render))
        .route("/select", post(routes::select).patch(routes::set_threshold))
        .route("/context/export", post(routes::context_export))
        .route("/context/import", post(routes::context_import))
        .route("/jobs", post(routes::create_job))
        .route("/jobs/{id}", get(routes::get_job).delete(routes::cancel_job))
        .route("/layers", get(routes::layers))
        .route("/layers/reorder", post(routes::reorder_layers))
        .route("/layers/{id}/toggle", post(routes::toggle_layer))
        .route("/layers/{id}", axum::routing::delete(routes::delete_layer))
        .route("/checkpoint/{version}", get(routes::checkpoint))
        .fallback(|| async { ApiError::not_found("no_route", "no such endpoint") })
        .layer(middleware::from_fn_with_state(state.clone(), idempotency))
        .layer(axum::extract::DefaultBodyLimit::max(BODY_LIMIT))
        .layer(cors)
        .with_state(state)
}

fn fingerprint(bytes: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    h.finish()
}

fn replay(c: &Cached) -> Response {
    let mut r = Response::new(Body::from(c.body.clone()));
    *r.status_mut() = c.status;
    if let Some(ct) = &c.content_type {
        r.headers_mut().insert(header::CONTENT_TYPE, ct.clone());
    }
    r.headers_mut().insert(REPLAY_HEADER, HeaderValue::from_static("true"));
    r
}

async fn idempotency(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if matches!(*req.method(), Method::GET | Method::HEAD | Method::OPTIONS) {
        return next.run(req).await;
    }
    let Some(key) = req
        .headers()
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
    else {
        return next.run(req).await;
    };
    let slot = format!("{} {} {key}", req.method(), req.uri().path());
    let (parts, body) = req.into_parts();
    let Ok(body) = to_bytes(body, BODY_LIMIT).await else {
        return ApiError::invalid("request body too large or unreadable").into_response();
    };
    let print = fingerprint(&body);
    let cached = state
        .inner
        .replay
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .entries
        .get(&slot)
        .cloned();
    if let Some(c) = cached {
        if c.fingerprint != print {
            return ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "idempotency_key_reused",
                "this key was already used with a different body",
            )
            .into_response();
        }
        return replay(&c);
    }
    let resp = next.run(Request::from_parts(parts, Body::from(body))).await;
    if resp.status().is_server_error() {
        return resp;
    }
    let (parts, body) = resp.into_parts();
    let Ok(bytes) = to_bytes(body, usize::MAX).await else {
        return ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", "response body unreadable").into_response();
    };
    state.inner.replay.lock().unwrap_or_else(|p| p.into_inner()).insert(
        slot,
        Cached {
            fingerprint: print,
            status: parts.status,
            content_type: parts.headers.get(header::CONTENT_TYPE).cloned(),
            body: bytes.clone(),
        },
    );
    Response::from_parts(parts, Body::from(bytes))
}

/// Serves `state` on `addr` until the process ends.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
