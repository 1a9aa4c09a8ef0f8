//! Raw attention, attention rollout, GradCAM on tokens, and AttentionCAM.
//!
//! Pooler models substitute the pooler's attention map for the last
//! self-attention map in raw attention and AttentionCAM; rollout propagates
//! the pooler map through the self-attention rollout matrix.

use super::{grad_attention, Heatmap, Method};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelBundle, Pooling, ScoreHead};
use crate::tensor::{Scalar, Tensor};

/// Head mean of the attention row `row` of a `[h, rows, cols]` map.
fn head_mean_row<T: Scalar>(attn: &Tensor<T>, row: usize) -> Vec<f64> {
    let (heads, rows, cols) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    let mut out = vec![0.0; cols];
    for h in 0..heads {
        let lane = &attn.data()[(h * rows + row) * cols..(h * rows + row + 1) * cols];
        for (o, &a) in out.iter_mut().zip(lane) {
            *o += a.as_f64();
        }
    }
    out.iter_mut().for_each(|o| *o /= heads as f64);
    out
}

/// The attention map whose query row summarizes the image: `A^L` for
/// class-token models, the pooler map on `Z^L` otherwise.
fn summary_attention<'a, T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &'a ForwardTrace<T>,
) -> Result<&'a Tensor<T>> {
    let layers = trace.num_layers();
    match bundle.config.pooling {
        Pooling::ClsToken if layers == 0 => {
            Err(Error::LayerRange("model has no attention layers".into()))
        }
        Pooling::ClsToken => Ok(trace.attention(layers)),
        Pooling::AttnPooler => trace.pooler_attention(layers).ok_or(Error::WrongPooling {
            expected: "attn_pooler",
            actual: "cls_token",
        }),
    }
}

/// Patch scores of raw attention: head-mean of the summary row.
pub fn raw_attention_scores<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
) -> Result<Vec<f64>> {
    let row = head_mean_row(summary_attention(bundle, trace)?, 0);
    Ok(row[bundle.config.prefix_tokens()..].to_vec())
}

pub fn raw_attention<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
) -> Result<Heatmap> {
    let layers = trace.num_layers();
    Heatmap::from_patch_scores(
        Method::RawAttention,
        vec![layers],
        &raw_attention_scores(bundle, trace)?,
        bundle.config.image_size,
    )
}

/// `A_tilde^L ... A_tilde^1` with `A_tilde = rownorm((mean_h A + I) / 2)`,
/// as a `[T, T]` matrix.
pub fn rollout_matrix<T: Scalar>(trace: &ForwardTrace<T>) -> Result<Tensor<f64>> {
    let tokens = trace.tokens[0].shape()[0];
    let mut acc = Tensor::<f64>::eye(tokens)?;
    for attn in trace.attention_maps() {
        let mut step = vec![0.0; tokens * tokens];
        for i in 0..tokens {
            let mut row = head_mean_row(attn, i);
            row[i] += 1.0;
            row.iter_mut().for_each(|v| *v *= 0.5);
            let sum: f64 = row.iter().sum();
            for (s, v) in step[i * tokens..(i + 1) * tokens].iter_mut().zip(row) {
                *s = v / sum;
            }
        }
        acc = Tensor::new([tokens, tokens], step)?.matmul(&acc)?;
    }
    Ok(acc)
}

pub fn rollout_scores<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
) -> Result<Vec<f64>> {
    let r = rollout_matrix(trace)?;
    let prefix = bundle.config.prefix_tokens();
    let row = match bundle.config.pooling {
        Pooling::ClsToken => r.row(0).to_vec(),
        Pooling::AttnPooler => {
            let p = Tensor::new(
                [1, r.shape()[0]],
                head_mean_row(summary_attention(bundle, trace)?, 0),
            )?;
            p.matmul(&r)?.into_data()
        }
    };
    Ok(row[prefix..].to_vec())
}

pub fn rollout<T: Scalar>(bundle: &ModelBundle<T>, trace: &ForwardTrace<T>) -> Result<Heatmap> {
    Heatmap::from_patch_scores(
        Method::Rollout,
        (1..=trace.num_layers()).collect(),
        &rollout_scores(bundle, trace)?,
        bundle.config.image_size,
    )
}

/// `ceil(2L / 3)`: layer 8 of a 12-layer model.
pub fn default_gradcam_layer(layers: usize) -> usize {
    (2 * layers).div_ceil(3).max(1)
}

/// Gradient of the final score w.r.t. every token of `Z^l`, back-propagated
/// through the head and layers `L..l+1`.
pub fn token_gradient<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    head: &ScoreHead<T>,
) -> Result<Tensor<T>> {
    let layers = trace.num_layers();
    if l > layers {
        return Err(Error::LayerOutOfRange {
            layer: l,
            max: layers,
        });
    }
    let pass = &trace.heads[layers];
    let d_embedding = head.backward(&pass.embedding);
    let mut grad = bundle.head_backward(&trace.tokens[layers], pass, &d_embedding)?;
    for k in (l + 1..=layers).rev() {
        grad = bundle.block_backward(k, &trace.blocks[k - 1], &trace.tokens[k - 1], &grad)?;
    }
    Ok(grad)
}

/// `relu((1/d) sum_k w_k Z[i, k])` for patch rows `i`, where `w` is the
/// mean token gradient over all rows.
pub fn gradcam_scores<T: Scalar>(
    tokens: &Tensor<T>,
    grad: &Tensor<T>,
    prefix: usize,
) -> Result<Vec<f64>> {
    let (rows, d) = tokens.dims2()?;
    if grad.shape() != tokens.shape() {
        return Err(Error::Heatmap("token gradient shape mismatch".into()));
    }
    let mut w = vec![0.0; d];
    for i in 0..rows {
        for (wk, &g) in w.iter_mut().zip(grad.row(i)) {
            *wk += g.as_f64();
        }
    }
    w.iter_mut().for_each(|wk| *wk /= rows as f64);
    Ok((prefix..rows)
        .map(|i| {
            let s: f64 = tokens
                .row(i)
                .iter()
                .zip(&w)
                .map(|(&z, &wk)| wk * z.as_f64())
                .sum();
            (s / d as f64).max(0.0)
        })
        .collect())
}

pub fn gradcam<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    head: &ScoreHead<T>,
) -> Result<Heatmap> {
    if l == 0 {
        return Err(Error::LayerOutOfRange {
            layer: 0,
            max: trace.num_layers(),
        });
    }
    let grad = token_gradient(bundle, trace, l, head)?;
    let scores = gradcam_scores(&trace.tokens[l], &grad, bundle.config.prefix_tokens())?;
    Heatmap::from_patch_scores(Method::Gradcam, vec![l], &scores, bundle.config.image_size)
}

/// `sum_h w_h A_h[0, prefix..]` with `w_h` the mean of head `h`'s gradient.
pub fn attentioncam_scores<T: Scalar>(
    grad: &Tensor<T>,
    attn: &Tensor<T>,
    prefix: usize,
) -> Result<Vec<f64>> {
    if grad.shape() != attn.shape() || attn.rank() != 3 {
        return Err(Error::Heatmap("attention gradient shape mismatch".into()));
    }
    let (heads, rows, cols) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    let per_head = rows * cols;
    let mut out = vec![0.0; cols - prefix];
    for h in 0..heads {
        let block = &grad.data()[h * per_head..(h + 1) * per_head];
        let w = block.iter().map(|g| g.as_f64()).sum::<f64>() / per_head as f64;
        let row0 = &attn.data()[h * per_head..h * per_head + cols];
        for (o, &a) in out.iter_mut().zip(&row0[prefix..]) {
            *o += w * a.as_f64();
        }
    }
    Ok(out)
}

pub fn attentioncam<T: Scalar>(
    bundle: &ModelBundle<T>,
    trace: &ForwardTrace<T>,
    head: &ScoreHead<T>,
) -> Result<Heatmap> {
    let layers = trace.num_layers();
    let grad = grad_attention(bundle, trace, layers, head)?;
    let scores = attentioncam_scores(
        &grad,
        summary_attention(bundle, trace)?,
        bundle.config.prefix_tokens(),
    )?;
    Heatmap::from_patch_scores(
        Method::Attentioncam,
        vec![layers],
        &scores,
        bundle.config.image_size,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockCache, HeadCache, HeadPass};

    /// Trace holding only attention maps, enough for attention baselines.
    fn attention_trace(maps: Vec<Tensor<f64>>) -> ForwardTrace<f64> {
        let tokens = maps[0].shape()[1];
        let empty = Tensor::<f64>::zeros([tokens, 1]).unwrap();
        let blocks = maps
            .into_iter()
            .map(|attn| BlockCache {
                normed: empty.clone(),
                q: empty.clone(),
                k: empty.clone(),
                v: empty.clone(),
                attn,
                mixed: empty.clone(),
                resid: empty.clone(),
                normed2: empty.clone(),
                hidden: empty.clone(),
            })
            .collect::<Vec<_>>();
        let pass = HeadPass {
            cache: HeadCache::Cls { token: vec![] },
            pooled: vec![],
            embedding: vec![],
        };
        ForwardTrace {
            tokens: vec![empty; blocks.len() + 1],
            heads: vec![pass; blocks.len() + 1],
            blocks,
        }
    }

    fn cls_bundle(layers: usize, heads: usize) -> ModelBundle<f64> {
        crate::fixtures::make_tiny_vit(&crate::fixtures::TinySpec::new(
            0,
            layers,
            heads,
            8,
            4,
            Pooling::ClsToken,
        ))
        .unwrap()
    }

    #[test]
    fn raw_attention_example() {
        let mut a = vec![0.2; 25];
        a[..5].copy_from_slice(&[0.5, 0.3, 0.2, 0.0, 0.0]);
        let trace = attention_trace(vec![Tensor::new([1, 5, 5], a).unwrap()]);
        let m = cls_bundle(1, 1);
        assert_eq!(
            raw_attention_scores(&m, &trace).unwrap(),
            vec![0.3, 0.2, 0.0, 0.0]
        );
        let h = raw_attention(&m, &trace).unwrap();
        assert_eq!(h.patch_grid, vec![1.0, 0.2 / 0.3, 0.0, 0.0]);
    }

    #[test]
    fn raw_attention_uniform_is_degenerate() {
        let trace = attention_trace(vec![Tensor::full([2, 5, 5], 0.2).unwrap()]);
        let h = raw_attention(&cls_bundle(1, 2), &trace).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rollout_of_identity_is_identity() {
        let eye = Tensor::<f64>::eye(5).unwrap().reshape([1, 5, 5]).unwrap();
        let trace = attention_trace(vec![eye.clone(), eye]);
        let r = rollout_matrix(&trace).unwrap();
        assert_eq!(r, Tensor::eye(5).unwrap());
        assert_eq!(
            rollout_scores(&cls_bundle(2, 1), &trace).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn single_layer_rollout_is_augmented_map() {
        let a: Vec<f64> = [0.4, 0.1, 0.2, 0.2, 0.1].repeat(5);
        let trace = attention_trace(vec![Tensor::new([1, 5, 5], a).unwrap()]);
        // Row 0 of (A + I) / 2 already sums to one.
        let expected = [0.05, 0.1, 0.1, 0.05];
        for (got, want) in rollout_scores(&cls_bundle(1, 1), &trace)
            .unwrap()
            .iter()
            .zip(expected)
        {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn default_gradcam_layers() {
        assert_eq!(default_gradcam_layer(12), 8);
        assert_eq!(default_gradcam_layer(3), 2);
        assert_eq!(default_gradcam_layer(1), 1);
    }

    #[test]
    fn gradcam_toy_head() {
        // s = sum_i z_i[0]: every token gradient is e_0.
        let z = Tensor::new([3, 2], vec![9.0, 9.0, 2.0, -1.0, -4.0, 5.0]).unwrap();
        let g = Tensor::new([3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(gradcam_scores(&z, &g, 1).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            gradcam_scores(&z, &g.scale(0.0), 1).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn attentioncam_unit_gradient_sums_heads() {
        let attn = Tensor::new([2, 1, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let ones = Tensor::ones([2, 1, 3]).unwrap();
        assert_eq!(
            attentioncam_scores(&ones, &attn, 1).unwrap(),
            vec![0.6, 0.6]
        );
    }

    #[test]
    fn attentioncam_negative_weight_uniform_map() {
        let attn = Tensor::full([1, 5, 5], 0.2).unwrap();
        let grad = Tensor::full([1, 5, 5], -0.3).unwrap();
        let scores = attentioncam_scores(&grad, &attn, 1).unwrap();
        let h = Heatmap::from_patch_scores(Method::Attentioncam, vec![1], &scores, 4).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));
    }
}
