//! Request-independent explanation and perturbation jobs shared by the HTTP
//! handlers and the command-line front end, so both emit identical bytes.

use legrad_core::eval::{
    argmax, auc, binarize, perturb_curve, ClassSource, PerturbMode, PerturbationCurve,
};
use legrad_core::explain::{explain, ExplainParams, Explanation, Query, Target};
use legrad_core::imaging::{encode_png_gray, Raster};
use legrad_core::model::{preprocess, ModelBundle};
use legrad_core::tensor::Scalar;
use legrad_core::{Error, Result};
use serde::Serialize;

use crate::{with_bundle, Bundle};

/// Opacity of the heatmap in overlay PNGs.
pub const OVERLAY_ALPHA: f64 = 0.5;

pub struct ExplainArtifacts {
    pub explanation: Explanation,
    /// Grayscale PNG of the upsampled heatmap.
    pub heatmap_png: Vec<u8>,
    /// Jet heatmap blended over the center-cropped input.
    pub overlay_png: Vec<u8>,
    /// Heatmap binarized with strict `>` at the requested threshold.
    pub mask_png: Vec<u8>,
}

fn explain_typed<T: Scalar>(
    bundle: &ModelBundle<T>,
    raster: &Raster,
    query: &Query,
    params: &ExplainParams,
    threshold: f64,
) -> Result<ExplainArtifacts> {
    let pre = preprocess::<T>(raster, &bundle.preprocess, bundle.config.image_size)?;
    let explanation = explain(bundle, &pre.tensor, query, params)?;
    let heat = &explanation.heatmap;
    let mask: Vec<f64> = binarize(&heat.values, threshold)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    Ok(ExplainArtifacts {
        heatmap_png: heat.to_png()?,
        overlay_png: heat.overlay_png(&pre.cropped, OVERLAY_ALPHA)?,
        mask_png: encode_png_gray(&mask, heat.width, heat.height)?,
        explanation,
    })
}

pub fn explain_image(
    bundle: &Bundle,
    raster: &Raster,
    query: &Query,
    params: &ExplainParams,
    threshold: f64,
) -> Result<ExplainArtifacts> {
    with_bundle!(bundle, m => explain_typed(m, raster, query, params, threshold))
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbOutcome {
    #[serde(flatten)]
    pub curve: PerturbationCurve,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_label: Option<String>,
    pub auc: f64,
}

fn perturb_typed<T: Scalar>(
    bundle: &ModelBundle<T>,
    raster: &Raster,
    query: Option<&Query>,
    classifier: Option<&str>,
    params: &ExplainParams,
    mode: PerturbMode,
    source: ClassSource,
) -> Result<PerturbOutcome> {
    let k = bundle.classifier(classifier)?;
    let pre = preprocess::<T>(raster, &bundle.preprocess, bundle.config.image_size)?;
    let reference = match (source, query.map(|q| &q.target)) {
        (ClassSource::Predicted, None) => {
            argmax(&bundle.classify(&bundle.image_embedding(&pre.tensor)?, k)?)
        }
        (ClassSource::Predicted, Some(_)) => {
            return Err(Error::Config(
                "class_source \"predicted\" takes no query".into(),
            ))
        }
        (ClassSource::Target, None) => {
            return Err(Error::Config(
                "class_source \"target\" needs a query".into(),
            ))
        }
        (ClassSource::Target, Some(Target::Label(l))) => k
            .label_index(l)
            .ok_or_else(|| Error::UnknownLabel(l.clone()))?,
        (ClassSource::Target, Some(Target::ClassIndex(i))) => {
            if *i >= k.num_classes() {
                return Err(Error::ClassIndex {
                    index: *i,
                    classes: k.num_classes(),
                });
            }
            *i
        }
        (ClassSource::Target, Some(Target::EmbeddingName(_))) => {
            return Err(Error::Config(
                "perturbation needs a class query, not an embedding".into(),
            ))
        }
    };
    let heat_query = Query {
        classifier: Some(k.name.clone()),
        target: Target::ClassIndex(reference),
    };
    let heat = explain(bundle, &pre.tensor, &heat_query, params)?.heatmap;
    let curve = perturb_curve(
        bundle,
        k,
        &pre.tensor,
        &heat.values,
        mode,
        source,
        reference,
    )?;
    Ok(PerturbOutcome {
        auc: auc(&curve.accuracies),
        reference_label: k.labels.get(reference).cloned(),
        curve,
    })
}

/// Erases pixels in heatmap order and tracks whether the reference class
/// survives. The heatmap is computed for the reference class.
pub fn perturb_image(
    bundle: &Bundle,
    raster: &Raster,
    query: Option<&Query>,
    classifier: Option<&str>,
    params: &ExplainParams,
    mode: PerturbMode,
    source: ClassSource,
) -> Result<PerturbOutcome> {
    with_bundle!(bundle, m => perturb_typed(m, raster, query, classifier, params, mode, source))
}
