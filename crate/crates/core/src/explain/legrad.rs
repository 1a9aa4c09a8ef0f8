use super::{Heatmap, Method};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelBundle, Pooling, ScoreHead};
use crate::tensor::{relu, Scalar, Tensor};

pub const DEFAULT_SUPPRESS_THRESHOLD: f64 = 0.8;

/// Per-layer token relevance `E_hat^l`, one entry per attention column.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExplanation {
    pub layer: usize,
    pub e_hat: Vec<f64>,
    /// Leading entries that are not patches (the class token).
    pub prefix: usize,
}

impl LayerExplanation {
    pub fn patches(&self) -> &[f64] {
        &self.e_hat[self.prefix.min(self.e_hat.len())..]
    }
}

fn check_layer(l: usize, max: usize, allow_zero: bool) -> Result<()> {
    if l > max || (l == 0 && !allow_zero) {
        return Err(Error::LayerOutOfRange { layer: l, max });
    }
    Ok(())
}

/// `s^l`: the score head applied to the embedding head's output on `Z^l`.
pub fn layer_score<T: Scalar>(trace: &ForwardTrace<T>, l: usize, head: &ScoreHead<T>) -> Result<T> {
    check_layer(l, trace.num_layers(), true)?;
    Ok(head.score(&trace.heads[l].embedding))
}

/// `d s^l / d A^l` with `A^l` treated as a leaf. For pooler models this is
/// the gradient w.r.t. the pooler's attention over `Z^l`, shape `[h, 1, T]`.
pub fn grad_attention<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    head: &ScoreHead<T>,
) -> Result<Tensor<T>> {
    check_layer(l, trace.num_layers(), false)?;
    let pass = &trace.heads[l];
    let d_embedding = head.backward(&pass.embedding);
    match bundle.config.pooling {
        Pooling::ClsToken => {
            let d_tokens = bundle.head_backward(&trace.tokens[l], pass, &d_embedding)?;
            Ok(bundle
                .block_backward_to_attention(l, &trace.blocks[l - 1], &d_tokens)?
                .0)
        }
        Pooling::AttnPooler => bundle.head_backward_to_pooler_attention(pass, &d_embedding),
    }
}

/// Central differences of `f` at `point`, with step `eps_scale * max(1, |x|)`
/// per entry. The divisor is the realized step `x+ - x-`.
pub fn central_difference<T: Scalar>(
    point: &Tensor<T>,
    eps_scale: f64,
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
) -> Result<Tensor<T>> {
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = point.data()[i];
        let eps = T::from_f64(eps_scale * x.as_f64().abs().max(1.0));
        let (xp, xm) = (x + eps, x - eps);
        probe.data_mut()[i] = xp;
        let fp = f(&probe)?;
        probe.data_mut()[i] = xm;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x;
        grad.push((fp - fm) / (xp - xm));
    }
    Ok(Tensor::new(point.shape().to_vec(), grad)?)
}

/// Finite-difference counterpart of [`grad_attention`]: perturbs each entry
/// of the captured post-softmax map and reruns only layer `l` and the
/// embedding head (or only the head, for the pooler map).
pub fn fd_grad_attention<T: Scalar>(
    bundle: &ModelBundle<T>,
    z0: &Tensor<T>,
    l: usize,
    head: &ScoreHead<T>,
    eps_scale: f64,
) -> Result<Tensor<T>> {
    check_layer(l, bundle.config.layers, false)?;
    let mut x = z0.clone();
    for k in 1..l {
        x = bundle.block_forward(k, &x, None)?.0;
    }
    let (z_l, cache) = bundle.block_forward(l, &x, None)?;
    match bundle.config.pooling {
        Pooling::ClsToken => central_difference(&cache.attn, eps_scale, |a| {
            let z = bundle.block_forward(l, &x, Some(a))?.0;
            Ok(head.score(&bundle.head_forward(&z)?.embedding))
        }),
        Pooling::AttnPooler => {
            let base = bundle.pool_attn_on(&z_l)?;
            central_difference(&base, eps_scale, |a| {
                Ok(head.score(&bundle.head_forward_with(&z_l, Some(a))?.embedding))
            })
        }
    }
}

/// `E_hat = (1 / (h * rows)) sum_h sum_i relu(grad[h, i, :])`.
pub fn layer_explanation<T: Scalar>(
    layer: usize,
    grad: &Tensor<T>,
    prefix: usize,
) -> Result<LayerExplanation> {
    if grad.rank() != 3 {
        return Err(Error::Heatmap(format!(
            "attention gradient has shape {:?}",
            grad.shape()
        )));
    }
    grad.check_finite("layer_explanation")?;
    let (heads, rows, cols) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let mut acc = vec![T::zero(); cols];
    for h in 0..heads {
        for i in 0..rows {
            let row = &grad.data()[(h * rows + i) * cols..(h * rows + i + 1) * cols];
            for (a, &g) in acc.iter_mut().zip(row) {
                *a = *a + relu(g);
            }
        }
    }
    let div = T::from_f64((heads * rows) as f64);
    Ok(LayerExplanation {
        layer,
        e_hat: acc.into_iter().map(|a| (a / div).as_f64()).collect(),
        prefix,
    })
}

/// Single-layer map: drop the prefix entries, reshape, upsample, normalize.
pub fn finalize_single_layer(e: &LayerExplanation, image_size: usize) -> Result<Heatmap> {
    Heatmap::from_patch_scores(Method::Legrad, vec![e.layer], e.patches(), image_size)
}

/// Arithmetic mean of the per-layer patch maps, then as
/// [`finalize_single_layer`].
pub fn merge_layers(explanations: &[LayerExplanation], image_size: usize) -> Result<Heatmap> {
    let first = explanations
        .first()
        .ok_or_else(|| Error::LayerRange("no layer explanations to merge".into()))?;
    let len = first.patches().len();
    let mut mean = vec![0.0; len];
    for e in explanations {
        if e.patches().len() != len {
            return Err(Error::Heatmap("layer explanations differ in length".into()));
        }
        for (m, &v) in mean.iter_mut().zip(e.patches()) {
            *m += v;
        }
    }
    let count = explanations.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    let layers = explanations.iter().map(|e| e.layer).collect();
    Heatmap::from_patch_scores(Method::Legrad, layers, &mean, image_size)
}

/// Per-layer explanations for `layers` over a finished trace.
pub fn legrad_layers<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
    head: &ScoreHead<T>,
    layers: &[usize],
) -> Result<Vec<LayerExplanation>> {
    let prefix = bundle.config.prefix_tokens();
    layers
        .iter()
        .map(|&l| layer_explanation(l, &grad_attention(bundle, trace, l, head)?, prefix))
        .collect()
}

/// LeGrad heatmap of a preprocessed image tensor.
pub fn legrad<T: Scalar>(
    bundle: &ModelBundle<T>,
    image: &Tensor<T>,
    head: &ScoreHead<T>,
    layers: &[usize],
) -> Result<Heatmap> {
    let trace = bundle.forward_trace(&bundle.embed(image)?)?;
    merge_layers(
        &legrad_layers(bundle, &trace, head, layers)?,
        bundle.config.image_size,
    )
}

/// Zeroes every pixel where `e_empty > th`; no renormalization.
pub fn background_suppress(e_s: &Heatmap, e_empty: &Heatmap, th: f64) -> Result<Heatmap> {
    if e_s.values.len() != e_empty.values.len() || e_s.width != e_empty.width {
        return Err(Error::Heatmap(format!(
            "cannot suppress a {}x{} map with a {}x{} map",
            e_s.width, e_s.height, e_empty.width, e_empty.height
        )));
    }
    if !(th > 0.0 && th <= 1.0) {
        return Err(Error::Heatmap(format!("threshold {th} outside (0, 1]")));
    }
    let mut out = e_s.clone();
    for (v, &m) in out.values.iter_mut().zip(&e_empty.values) {
        if m > th {
            *v = 0.0;
        }
    }
    Ok(out)
}

impl<T: Scalar> ModelBundle<T> {
    /// Pooler attention over the final-normed `tokens`.
    pub(crate) fn pool_attn_on(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        match self.head_forward(tokens)?.cache {
            crate::model::HeadCache::Pooler(c) => Ok(c.attn),
            crate::model::HeadCache::Cls { .. } => Err(Error::WrongPooling {
                expected: "attn_pooler",
                actual: "cls_token",
            }),
        }
    }
}
