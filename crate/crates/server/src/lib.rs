//! HTTP and WebSocket front end for a [`Platform`].
//!
//! Every error leaves as `{"error": {"code", "message"}}` with the status
//! from [`ApiError::http_status`]. Callers authenticate with
//! `Authorization: Bearer <token>`; the HITL channel also accepts a
//! `token` query parameter since browsers cannot set headers on sockets.

mod hitl;
mod routes;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{FromRequest, FromRequestParts, Query, Request};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use gauntlet_core::api::{ApiError, Platform, Principal};

pub use routes::SubmissionQuery;

/// Shared handler state.
#[derive(Clone)]
pub struct AppState {
    pub platform: Arc<Platform>,
}

/// An [`ApiError`] rendered as an HTTP response.
#[derive(Debug)]
pub struct HttpError(pub ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        Self(e)
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, axum::Json(self.0.envelope())).into_response()
    }
}

pub type HttpResult<T> = Result<T, HttpError>;

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

fn bearer(parts: &Parts) -> Option<String> {
    let header = parts.headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let token = header.strip_prefix("Bearer ")?.trim();
    (!token.is_empty()).then(|| token.to_owned())
}

fn token_of(parts: &Parts) -> Option<String> {
    bearer(parts).or_else(|| {
        Query::<TokenQuery>::try_from_uri(&parts.uri)
            .ok()
            .and_then(|q| q.0.token)
    })
}

/// An authenticated caller.
pub struct Caller(pub Principal);

impl FromRequestParts<AppState> for Caller {
    type Rejection = HttpError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = token_of(parts).ok_or(ApiError::Unauthenticated)?;
        Ok(Caller(state.platform.authenticate(&token)?))
    }
}

/// A caller who may be anonymous. A presented but invalid token is refused.
pub struct MaybeCaller(pub Option<Principal>);

impl FromRequestParts<AppState> for MaybeCaller {
    type Rejection = HttpError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        match token_of(parts) {
            None => Ok(MaybeCaller(None)),
            Some(token) => Ok(MaybeCaller(Some(state.platform.authenticate(&token)?))),
        }
    }
}

/// JSON request body whose parse failures use the error envelope.
pub struct JsonBody<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for JsonBody<T> {
    type Rejection = HttpError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = axum::body::Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::BadRequest(e.body_text()))?;
        let body = if bytes.is_empty() { &b"{}"[..] } else { &bytes[..] };
        serde_json::from_slice(body)
            .map(JsonBody)
            .map_err(|e| HttpError(ApiError::BadRequest(format!("invalid JSON body: {e}"))))
    }
}

/// Runs platform work off the async executor.
pub(crate) async fn blocking<T, F>(f: F) -> HttpResult<T>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| HttpError(ApiError::Internal(e.to_string())))?
        .map_err(HttpError)
}

/// The full route table.
pub fn router(platform: Arc<Platform>) -> Router {
    let limit = usize::try_from(platform.settings().artifact_limit_bytes).unwrap_or(usize::MAX);
    let state = AppState { platform };
    routes::routes()
        .merge(hitl::routes())
        .layer(axum::extract::DefaultBodyLimit::max(limit.saturating_add(1)))
        .with_state(state)
}

/// Serves `platform` on `addr` until `shutdown` resolves, sweeping idle
/// HITL sessions every `sweep_every`.
pub async fn serve(
    platform: Arc<Platform>,
    listener: tokio::net::TcpListener,
    sweep_every: Duration,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let platform = Arc::clone(&platform);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep_every);
            loop {
                tick.tick().await;
                let p = Arc::clone(&platform);
                let _ = tokio::task::spawn_blocking(move || p.hitl().sweep()).await;
            }
        })
    };
    let app = router(Arc::clone(&platform)).into_make_service_with_connect_info::<SocketAddr>();
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    tokio::task::spawn_blocking(move || platform.shutdown()).await.ok();
    result
}
