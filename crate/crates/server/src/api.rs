//! Wire types of the `/v1` API (documented in `docs/api.md`).

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use legrad_core::eval::{ClassSource, PerturbMode};
use legrad_core::explain::{
    ExplainParams, LayerSpec, LayerSummary, Method, Query, Target, DEFAULT_SUPPRESS_THRESHOLD,
};
use legrad_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use crate::service::ExplainArtifacts;
use crate::Bundle;

/// Exactly one of the three fields must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_name: Option<String>,
}

impl QuerySpec {
    pub fn target(&self) -> Result<Target, ApiError> {
        match (&self.label, self.class_index, &self.embedding_name) {
            (Some(l), None, None) => Ok(Target::Label(l.clone())),
            (None, Some(i), None) => Ok(Target::ClassIndex(i)),
            (None, None, Some(e)) => Ok(Target::EmbeddingName(e.clone())),
            _ => Err(ApiError::bad_request(
                "query must set exactly one of label, class_index, embedding_name",
            )),
        }
    }
}

fn default_threshold() -> f64 {
    0.5
}

fn default_suppress_threshold() -> f64 {
    DEFAULT_SUPPRESS_THRESHOLD
}

/// Body of `POST /v1/explain` and `POST /v1/perturb`. `mode` and
/// `class_source` belong to perturbation only; `image` is absent when the
/// image arrives as a multipart part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QuerySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<String>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub layer_range: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcam_layer: Option<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub suppress_background: bool,
    #[serde(default = "default_suppress_threshold")]
    pub suppress_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PerturbMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_source: Option<ClassSource>,
    /// Adds `timing_ms` to the response. Off by default so identical
    /// requests produce identical bodies.
    #[serde(default)]
    pub timing: bool,
}

fn default_method() -> Method {
    Method::Legrad
}

impl ExplainRequest {
    pub fn params(&self) -> Result<ExplainParams, ApiError> {
        for (name, v) in [
            ("threshold", self.threshold),
            ("suppress_threshold", self.suppress_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ApiError::bad_request(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(ExplainParams {
            method: self.method,
            layers: self.layer_range.clone(),
            gradcam_layer: self.gradcam_layer,
            suppress_background: self.suppress_background,
            suppress_threshold: self.suppress_threshold,
        })
    }

    pub fn query(&self) -> Result<Option<Query>, ApiError> {
        self.query
            .as_ref()
            .map(|q| {
                Ok(Query {
                    classifier: self.classifier.clone(),
                    target: q.target()?,
                })
            })
            .transpose()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub decode: f64,
    pub compute: f64,
    pub encode: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplainResponse {
    pub model: String,
    pub provenance: String,
    pub method: Method,
    pub layer_range: Vec<usize>,
    pub query: QuerySpec,
    /// Query score at the final layer.
    pub score: f64,
    pub threshold: f64,
    pub suppress_background: bool,
    pub grid: usize,
    pub patch_grid: Vec<Vec<f64>>,
    pub width: usize,
    pub height: usize,
    pub values: Vec<Vec<f64>>,
    /// Base64 PNGs; present in HTTP responses, omitted from CLI JSON files
    /// which sit next to the PNG files themselves.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap_png: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlay_png: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_png: Option<String>,
    pub per_layer: Vec<LayerSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<Timing>,
}

impl ExplainResponse {
    pub fn new(
        model: &str,
        bundle: &Bundle,
        request: &ExplainRequest,
        out: &ExplainArtifacts,
        embed_pngs: bool,
    ) -> Self {
        let heat = &out.explanation.heatmap;
        let png = |bytes: &[u8]| embed_pngs.then(|| BASE64.encode(bytes));
        Self {
            model: model.to_string(),
            provenance: bundle.provenance().to_string(),
            method: heat.method,
            layer_range: heat.layers.clone(),
            query: request.query.clone().unwrap_or_default(),
            score: out.explanation.score,
            threshold: request.threshold,
            suppress_background: request.suppress_background,
            grid: heat.grid,
            patch_grid: heat
                .patch_grid
                .chunks(heat.grid)
                .map(<[f64]>::to_vec)
                .collect(),
            width: heat.width,
            height: heat.height,
            values: heat
                .values
                .chunks(heat.width)
                .map(<[f64]>::to_vec)
                .collect(),
            heatmap_png: png(&out.heatmap_png),
            overlay_png: png(&out.overlay_png),
            mask_png: png(&out.mask_png),
            per_layer: out.explanation.per_layer.clone(),
            timing_ms: None,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("response serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbResponse {
    pub model: String,
    pub provenance: String,
    pub method: Method,
    #[serde(flatten)]
    pub outcome: crate::service::PerturbOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<Timing>,
}

/// JSON error `{"error": {"code", "message"}}` with its HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

/// Decoded image size limit.
pub const MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    /// Body extraction failures keep their status; an oversized body is
    /// reported like an oversized image.
    pub fn rejected(status: StatusCode, message: impl Into<String>) -> Self {
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE {
            "image_too_large"
        } else {
            "invalid_request"
        };
        Self::new(status, code, message)
    }

    pub fn too_large(bytes: usize) -> Self {
        Self::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "image_too_large",
            format!("image is {bytes} bytes, limit is {MAX_IMAGE_BYTES}"),
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::UnknownLabel(_)
            | Error::ClassIndex { .. }
            | Error::UnknownClassifier(_)
            | Error::UnknownEmbedding(_)
            | Error::LayerRange(_)
            | Error::LayerOutOfRange { .. }
            | Error::WrongPooling { .. }
            | Error::Config(_) => Self::bad_request(message),
            Error::Image(_) => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "undecodable_image",
                message,
            ),
            _ => Self::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "inference_failed",
                message,
            ),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}
