use serde::{Deserialize, Serialize};

use super::{
    attentioncam, background_suppress, default_gradcam_layer, gradcam, layer_score, legrad_layers,
    merge_layers, raw_attention, rollout, Heatmap, LayerSpec, Method, Query,
    DEFAULT_SUPPRESS_THRESHOLD,
};
use crate::error::Result;
use crate::model::{ForwardTrace, ModelBundle, ScoreHead, EMPTY_PROMPT_EMBEDDING};
use crate::tensor::{Scalar, Tensor};

fn default_threshold() -> f64 {
    DEFAULT_SUPPRESS_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainParams {
    pub method: Method,
    #[serde(default)]
    pub layers: LayerSpec,
    /// GradCAM layer; falls back to a single explicit `layers` entry, then
    /// to `ceil(2L / 3)`.
    #[serde(default)]
    pub gradcam_layer: Option<usize>,
    #[serde(default)]
    pub suppress_background: bool,
    #[serde(default = "default_threshold")]
    pub suppress_threshold: f64,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            method: Method::Legrad,
            layers: LayerSpec::default(),
            gradcam_layer: None,
            suppress_background: false,
            suppress_threshold: DEFAULT_SUPPRESS_THRESHOLD,
        }
    }
}

/// Score and relevance statistics of one LeGrad layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub score: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub heatmap: Heatmap,
    /// `s` at the final layer.
    pub score: f64,
    pub per_layer: Vec<LayerSummary>,
}

fn method_map<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
    head: &ScoreHead<T>,
    params: &ExplainParams,
    layers: &[usize],
) -> Result<(Heatmap, Vec<LayerSummary>)> {
    let size = bundle.config.image_size;
    let total = bundle.config.layers;
    Ok(match params.method {
        Method::Legrad => {
            let explanations = legrad_layers(bundle, trace, head, layers)?;
            let summaries = explanations
                .iter()
                .map(|e| {
                    let p = e.patches();
                    Ok(LayerSummary {
                        layer: e.layer,
                        score: layer_score(trace, e.layer, head)?.as_f64(),
                        max: p.iter().copied().fold(0.0, f64::max),
                        mean: p.iter().sum::<f64>() / p.len().max(1) as f64,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (merge_layers(&explanations, size)?, summaries)
        }
        Method::RawAttention => (raw_attention(bundle, trace)?, Vec::new()),
        Method::Rollout => (rollout(bundle, trace)?, Vec::new()),
        Method::Gradcam => {
            let l = params
                .gradcam_layer
                .or_else(|| params.layers.single())
                .unwrap_or_else(|| default_gradcam_layer(total));
            LayerSpec::List(vec![l]).resolve(total)?;
            (gradcam(bundle, trace, l, head)?, Vec::new())
        }
        Method::Attentioncam => (attentioncam(bundle, trace, head)?, Vec::new()),
    })
}

/// Runs one method on a preprocessed image tensor.
pub fn explain<T: Scalar>(
    bundle: &ModelBundle<T>,
    image: &Tensor<T>,
    query: &Query,
    params: &ExplainParams,
) -> Result<Explanation> {
    let head = bundle.score_head(query)?;
    let layers = params.layers.resolve(bundle.config.layers)?;
    let trace = bundle.forward_trace(&bundle.embed(image)?)?;
    let (mut heatmap, per_layer) = method_map(bundle, &trace, &head, params, &layers)?;
    if params.suppress_background {
        let empty = bundle.score_head(&Query::embedding(EMPTY_PROMPT_EMBEDDING))?;
        let (background, _) = method_map(bundle, &trace, &empty, params, &layers)?;
        heatmap = background_suppress(&heatmap, &background, params.suppress_threshold)?;
    }
    Ok(Explanation {
        heatmap,
        score: layer_score(&trace, bundle.config.layers, &head)?.as_f64(),
        per_layer,
    })
}
