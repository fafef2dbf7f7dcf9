//! HTTP JSON API over one immutable bundle.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::limit::RequestBodyLimitLayer;

use crate::engine::{Engine, EngineError, InstanceRequest, NudgeBody, WhatIfRequest};

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub addr: SocketAddr,
    pub max_body_bytes: usize,
    /// `*` allows any origin; `None` disables CORS headers.
    pub cors_origin: Option<String>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            max_body_bytes: 1 << 20,
            cors_origin: Some("*".into()),
        }
    }
}

/// `None` when the bundle failed to load; model endpoints then answer 503.
pub type AppState = Arc<Option<Engine>>;

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::BadRequest(m) => ApiError(StatusCode::BAD_REQUEST, m),
            EngineError::Unprocessable(m) => ApiError(StatusCode::UNPROCESSABLE_ENTITY, m),
            EngineError::Internal(m) => ApiError(StatusCode::INTERNAL_SERVER_ERROR, m),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn engine(state: &AppState) -> Result<&Engine, ApiError> {
    state
        .as_ref()
        .as_ref()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "model bundle not loaded".into()))
}

fn decode<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

fn ok<T: Serialize>(v: T) -> ApiResult<T> {
    Ok(Json(v))
}

async fn healthz() -> &'static str {
    "ok"
}

async fn model_info(State(state): State<AppState>) -> ApiResult<crate::engine::ModelInfo> {
    ok(engine(&state)?.info())
}

async fn predict(State(state): State<AppState>, body: Bytes) -> ApiResult<crate::engine::PredictResponse> {
    let e = engine(&state)?;
    let req: InstanceRequest = decode(&body)?;
    let x = e.resolve(&req)?;
    ok(e.predict(&x)?)
}

async fn explain(State(state): State<AppState>, body: Bytes) -> ApiResult<crate::engine::ExplainResponse> {
    let e = engine(&state)?;
    let req: InstanceRequest = decode(&body)?;
    let x = e.resolve(&req)?;
    ok(e.explain(&x)?)
}

async fn whatif(State(state): State<AppState>, body: Bytes) -> ApiResult<crate::engine::WhatIfResponse> {
    let e = engine(&state)?;
    let req: WhatIfRequest = decode(&body)?;
    ok(e.whatif(&req)?)
}

async fn nudges(State(state): State<AppState>, body: Bytes) -> ApiResult<crate::engine::NudgeResponse> {
    let e = engine(&state)?;
    let req: NudgeBody = decode(&body)?;
    ok(e.nudge(&req)?)
}

pub fn router(state: AppState, config: &ApiConfig) -> Router {
    let mut app = Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/model/info", get(model_info))
        .route("/v1/predict", post(predict))
        .route("/v1/explain", post(explain))
        .route("/v1/whatif", post(whatif))
        .route("/v1/nudges", post(nudges))
        .with_state(state)
        .layer(RequestBodyLimitLayer::new(config.max_body_bytes));
    if let Some(origin) = &config.cors_origin {
        let allow = if origin == "*" {
            AllowOrigin::any()
        } else {
            match HeaderValue::from_str(origin) {
                Ok(v) => AllowOrigin::exact(v),
                Err(_) => AllowOrigin::list([]),
            }
        };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(allow)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    app
}

pub async fn serve(state: AppState, config: ApiConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state, &config)).await
}
