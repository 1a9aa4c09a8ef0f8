//! HTTP/JSON service over loaded model bundles.
//!
//! Bundles are loaded once at startup and shared read-only; every request
//! runs on the blocking pool with its own scratch memory.

pub mod api;
mod models;
pub mod service;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{
    DefaultBodyLimit, FromRequest, Multipart, Path, Query as UrlQuery, Request, State,
};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use legrad_core::eval::{ClassSource, PerturbMode};
use legrad_core::imaging::Raster;
use serde::Deserialize;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use api::{
    ApiError, ExplainRequest, ExplainResponse, PerturbResponse, QuerySpec, Timing, MAX_IMAGE_BYTES,
};
pub use models::{
    Bundle, ClassifierSummary, ModelEntry, ModelInfo, ModelSummary, Precision, Registry, Vocab,
    VocabEntry,
};

/// Request body limit. Leaves room for base64 expansion of an image at
/// [`MAX_IMAGE_BYTES`], which is enforced separately after decoding.
pub const MAX_BODY_BYTES: usize = 12 * 1024 * 1024;

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Exact origin allowed by CORS; any origin when unset.
    pub cors_origin: Option<String>,
}

#[derive(Clone)]
struct AppState {
    registry: Arc<Registry>,
}

pub fn router(registry: Registry, config: &ServerConfig) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match config.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(AllowOrigin::exact(origin)),
        _ => cors.allow_origin(Any),
    };
    Router::new()
        .route("/v1/models", get(list_models))
        .route("/v1/models/{id}/vocab", get(vocab))
        .route("/v1/explain", post(explain))
        .route("/v1/perturb", post(perturb))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors)
        .with_state(AppState {
            registry: Arc::new(registry),
        })
}

#[derive(Debug)]
pub enum ServeError {
    Bind(SocketAddr, std::io::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for ServeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServeError::Bind(addr, e) => write!(f, "cannot bind {addr}: {e}"),
            ServeError::Io(e) => write!(f, "server error: {e}"),
        }
    }
}

impl std::error::Error for ServeError {}

async fn list_models(State(state): State<AppState>) -> Json<Vec<ModelSummary>> {
    Json(
        state
            .registry
            .entries()
            .iter()
            .map(ModelEntry::summary)
            .collect(),
    )
}

#[derive(Deserialize)]
struct VocabParams {
    classifier: Option<String>,
}

fn lookup(registry: &Registry, id: &str) -> Result<Arc<Bundle>, ApiError> {
    let entry = registry
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown model {id:?}")))?;
    entry
        .bundle
        .clone()
        .map_err(|e| ApiError::not_found(format!("model {id:?} failed to load: {e}")))
}

async fn vocab(
    State(state): State<AppState>,
    Path(id): Path<String>,
    UrlQuery(params): UrlQuery<VocabParams>,
) -> Result<Json<Vocab>, ApiError> {
    let bundle = lookup(&state.registry, &id)?;
    Ok(Json(bundle.vocab(&id, params.classifier.as_deref())?))
}

/// Reads either a JSON body (image as base64) or a multipart form with a
/// `request` JSON part and an `image` file part.
async fn read_request(req: Request) -> Result<(ExplainRequest, Vec<u8>), ApiError> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (parsed, image) = if multipart {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::rejected(e.status(), e.body_text()))?;
        let (mut request, mut image) = (None, None);
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::rejected(e.status(), e.body_text()))?
        {
            let name = field.name().unwrap_or_default().to_string();
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ApiError::rejected(e.status(), e.body_text()))?;
            match name.as_str() {
                "request" => request = Some(bytes),
                "image" => image = Some(bytes.to_vec()),
                other => {
                    return Err(ApiError::bad_request(format!(
                        "unexpected form field {other:?}"
                    )))
                }
            }
        }
        let request =
            request.ok_or_else(|| ApiError::bad_request("missing form field \"request\""))?;
        let parsed: ExplainRequest =
            serde_json::from_slice(&request).map_err(|e| ApiError::bad_request(e.to_string()))?;
        if parsed.image.is_some() {
            return Err(ApiError::bad_request(
                "image given both inline and as a form field",
            ));
        }
        let image = image.ok_or_else(|| ApiError::bad_request("missing form field \"image\""))?;
        (parsed, image)
    } else {
        let body = axum::body::Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::rejected(e.status(), e.body_text()))?;
        let parsed: ExplainRequest =
            serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let encoded = parsed
            .image
            .as_deref()
            .ok_or_else(|| ApiError::bad_request("missing field \"image\""))?;
        let image = BASE64
            .decode(encoded)
            .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
        (parsed, image)
    };
    if image.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::too_large(image.len()));
    }
    Ok((parsed, image))
}

fn millis(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

async fn blocking<R: Send + 'static>(
    job: impl FnOnce() -> Result<R, ApiError> + Send + 'static,
) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(job).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "inference_failed",
            e.to_string(),
        )
    })?
}

async fn explain(State(state): State<AppState>, req: Request) -> Result<Response, ApiError> {
    let (request, image) = read_request(req).await?;
    if request.mode.is_some() || request.class_source.is_some() {
        return Err(ApiError::bad_request(
            "mode and class_source apply to /v1/perturb only",
        ));
    }
    let bundle = lookup(&state.registry, &request.model)?;
    let params = request.params()?;
    let query = request
        .query()?
        .ok_or_else(|| ApiError::bad_request("missing field \"query\""))?;
    tracing::info!(model = %request.model, method = %params.method, "explain");
    let response = blocking(move || {
        let start = Instant::now();
        let raster = Raster::decode(&image)?;
        let decode = millis(start);
        let start = Instant::now();
        let out = service::explain_image(&bundle, &raster, &query, &params, request.threshold)?;
        let compute = millis(start);
        let start = Instant::now();
        let mut response = ExplainResponse::new(&request.model, &bundle, &request, &out, true);
        if request.timing {
            response.timing_ms = Some(Timing {
                decode,
                compute,
                encode: millis(start),
            });
        }
        Ok(response)
    })
    .await?;
    Ok(Json(response).into_response())
}

async fn perturb(State(state): State<AppState>, req: Request) -> Result<Response, ApiError> {
    let (request, image) = read_request(req).await?;
    let bundle = lookup(&state.registry, &request.model)?;
    let params = request.params()?;
    let query = request.query()?;
    let mode = request.mode.unwrap_or(PerturbMode::Positive);
    let source = request.class_source.unwrap_or(if query.is_some() {
        ClassSource::Target
    } else {
        ClassSource::Predicted
    });
    tracing::info!(model = %request.model, ?mode, ?source, "perturb");
    let response = blocking(move || {
        let start = Instant::now();
        let raster = Raster::decode(&image)?;
        let decode = millis(start);
        let start = Instant::now();
        let outcome = service::perturb_image(
            &bundle,
            &raster,
            query.as_ref(),
            request.classifier.as_deref(),
            &params,
            mode,
            source,
        )?;
        let compute = millis(start);
        Ok(PerturbResponse {
            model: request.model.clone(),
            provenance: bundle.provenance().to_string(),
            method: params.method,
            outcome,
            timing_ms: request.timing.then_some(Timing {
                decode,
                compute,
                encode: 0.0,
            }),
        })
    })
    .await?;
    Ok(Json(response).into_response())
}

/// Binds `addr` and serves until ctrl-c. Bind failures are reported apart
/// from later I/O errors so callers can map them to distinct exit codes.
pub async fn serve(
    registry: Registry,
    config: ServerConfig,
    addr: SocketAddr,
) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServeError::Bind(addr, e))?;
    let local = listener.local_addr().map_err(ServeError::Io)?;
    tracing::info!(%local, models = registry.entries().len(), "listening");
    axum::serve(listener, router(registry, &config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServeError::Io)
}
