//! HTTP front end over [`api`](crate::api).
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/retrieve` | `{layout, m?}` |
//! | POST | `/fuse-preview` | `{layout, m?, entry_ids?}` |
//! | POST | `/layout/validate` | a layout |
//! | GET | `/bank/stats` | |
//! | GET | `/taxonomy` | |
//! | GET | `/preview/{id}` | |
//!
//! Bodies are pure functions of the bank, the request and the config.
//! Wall-clock timings go in a `Server-Timing` header and scan counters in
//! `X-Bachkit-Scan`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use bachkit_core::layout::SalientLayout;
use bachkit_core::retrieval::RetrievalResult;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{self, ApiError, Context, FusePreviewRequest, RetrieveRequest};

pub const TIMING_HEADER: &str = "server-timing";
pub const SCAN_HEADER: &str = "x-bachkit-scan";

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json(status, &self.body())
    }
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed payload: {e}")))
}

/// Runs CPU-bound work off the async workers.
async fn blocking<T, F>(ctx: &Arc<Context>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Context) -> Result<T, ApiError> + Send + 'static,
{
    let ctx = ctx.clone();
    tokio::task::spawn_blocking(move || f(&ctx))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn timing_headers(response: &mut Response, result: &RetrievalResult) {
    let t = result.timing;
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let timing = format!(
        "profile;dur={:.3}, scan;dur={:.3}, merge;dur={:.3}",
        ms(t.profile),
        ms(t.scan),
        ms(t.merge)
    );
    let scan = format!("scored={}; pruned={}", result.counters.scored, result.counters.pruned);
    let headers = response.headers_mut();
    for (name, value) in [(TIMING_HEADER, timing), (SCAN_HEADER, scan)] {
        if let Ok(v) = HeaderValue::from_str(&value) {
            headers.insert(name, v);
        }
    }
}

async fn retrieve(State(ctx): State<Arc<Context>>, body: Bytes) -> Result<Response, ApiError> {
    let request: RetrieveRequest = parse(&body)?;
    let (body, result) = blocking(&ctx, move |c| api::retrieve(c, &request)).await?;
    let mut response = json(StatusCode::OK, &body);
    timing_headers(&mut response, &result);
    Ok(response)
}

async fn fuse_preview(State(ctx): State<Arc<Context>>, body: Bytes) -> Result<Response, ApiError> {
    let request: FusePreviewRequest = parse(&body)?;
    let preview = blocking(&ctx, move |c| api::fuse_preview(c, &request)).await?;
    Ok(json(StatusCode::OK, &preview.response))
}

async fn validate(State(ctx): State<Arc<Context>>, body: Bytes) -> Result<Response, ApiError> {
    let layout: SalientLayout = parse(&body)?;
    Ok(json(StatusCode::OK, &api::validate(&ctx, &layout)))
}

async fn bank_stats(State(ctx): State<Arc<Context>>) -> Response {
    json(StatusCode::OK, &ctx.bank.stats())
}

async fn taxonomy(State(ctx): State<Arc<Context>>) -> Response {
    json(StatusCode::OK, ctx.bank.taxonomy())
}

async fn preview(State(ctx): State<Arc<Context>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let (kind, bytes) = blocking(&ctx, move |c| api::entry_preview(c, &id)).await?;
    Ok(([(header::CONTENT_TYPE, kind)], Body::from(bytes)).into_response())
}

async fn not_found() -> ApiError {
    ApiError::NotFound("no such endpoint".into())
}

pub fn router(ctx: Arc<Context>) -> Router {
    Router::new()
        .route("/retrieve", post(retrieve))
        .route("/fuse-preview", post(fuse_preview))
        .route("/layout/validate", post(validate))
        .route("/bank/stats", get(bank_stats))
        .route("/taxonomy", get(taxonomy))
        .route("/preview/{id}", get(preview))
        .fallback(not_found)
        .with_state(ctx)
}

/// Serves until ctrl-c.
pub async fn serve(ctx: Arc<Context>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving {} entries of bank {} on http://{}",
        ctx.bank.len(),
        &ctx.bank.checksum()[..12],
        listener.local_addr()?
    );
    axum::serve(listener, router(ctx))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
