//! Reverse-mode gradients through the embedding head and individual blocks.
//!
//! Only input gradients are computed; weights are constants here. Each
//! function consumes the caches its forward counterpart recorded.

use super::config::Pooling;
use super::forward::{BlockCache, HeadCache, HeadPass, PoolerCache};
use super::weights::{AttnPoolerWeights, ModelBundle};
use crate::error::{Error, Result};
use crate::tensor::{dot, gelu_grad, GeluKind, Scalar, Tensor};

/// Gradient of a scalar w.r.t. a post-softmax attention map.
fn softmax_backward_lane<T: Scalar>(probs: &[T], d_probs: &[T]) -> Vec<T> {
    let inner = dot(probs, d_probs);
    probs
        .iter()
        .zip(d_probs)
        .map(|(&p, &g)| p * (g - inner))
        .collect()
}

/// `dA[h, i, j] = sum_c dO[i, h*dh + c] V[j, h*dh + c]`.
fn attention_grad<T: Scalar>(
    d_mixed: &Tensor<T>,
    values: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (rows, d) = d_mixed.dims2()?;
    let (cols, _) = values.dims2()?;
    let dh = d / heads;
    let mut out = vec![T::zero(); heads * rows * cols];
    for h in 0..heads {
        for i in 0..rows {
            let go = &d_mixed.row(i)[h * dh..(h + 1) * dh];
            for j in 0..cols {
                out[(h * rows + i) * cols + j] = dot(go, &values.row(j)[h * dh..(h + 1) * dh]);
            }
        }
    }
    Ok(Tensor::new([heads, rows, cols], out)?)
}

/// `dV[j, h*dh + c] = sum_i A[h, i, j] dO[i, h*dh + c]`.
fn value_grad<T: Scalar>(attn: &Tensor<T>, d_mixed: &Tensor<T>) -> Result<Tensor<T>> {
    let (heads, rows, cols) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    let (_, d) = d_mixed.dims2()?;
    let dh = d / heads;
    let mut out = vec![T::zero(); cols * d];
    for h in 0..heads {
        for i in 0..rows {
            let a = &attn.data()[(h * rows + i) * cols..(h * rows + i + 1) * cols];
            let go = &d_mixed.row(i)[h * dh..(h + 1) * dh];
            for (j, &w) in a.iter().enumerate() {
                for (slot, &g) in out[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(go) {
                    *slot = *slot + w * g;
                }
            }
        }
    }
    Ok(Tensor::new([cols, d], out)?)
}

fn mlp_backward<T: Scalar>(
    fc1: &super::layers::Linear<T>,
    fc2: &super::layers::Linear<T>,
    hidden: &[T],
    d_out: &[T],
    kind: GeluKind,
) -> Vec<T> {
    let d_act = fc2.backward_vec(d_out);
    let d_hidden: Vec<T> = d_act
        .iter()
        .zip(hidden)
        .map(|(&g, &h)| g * gelu_grad(h, kind))
        .collect();
    fc1.backward_vec(&d_hidden)
}

impl<T: Scalar> AttnPoolerWeights<T> {
    /// Gradient w.r.t. the pooled attention output `o` (before any
    /// output projection) given the gradient of the pooler output.
    fn backward_to_pooled(&self, cache: &PoolerCache<T>, d_output: &[T], kind: GeluKind) -> Vec<T> {
        let d_projected = match (&self.post, &cache.post_hidden) {
            (Some(post), Some(hidden)) => {
                let d_normed = mlp_backward(&post.fc1, &post.fc2, hidden, d_output, kind);
                let d_ln = post.norm.backward_vec(&cache.projected, &d_normed);
                d_output.iter().zip(&d_ln).map(|(&a, &b)| a + b).collect()
            }
            _ => d_output.to_vec(),
        };
        match &self.out {
            Some(o) => o.backward_vec(&d_projected),
            None => d_projected,
        }
    }

    /// Gradient w.r.t. the pooler attention map `[h, 1, tokens]`.
    pub fn backward_to_attention(
        &self,
        cache: &PoolerCache<T>,
        d_output: &[T],
        heads: usize,
        kind: GeluKind,
    ) -> Result<Tensor<T>> {
        let d_pooled = self.backward_to_pooled(cache, d_output, kind);
        let d_mixed = Tensor::new([1, d_pooled.len()], d_pooled)?;
        attention_grad(&d_mixed, &cache.values, heads)
    }

    /// Gradient w.r.t. the pooler's input tokens.
    pub fn backward_to_inputs(
        &self,
        cache: &PoolerCache<T>,
        d_output: &[T],
        heads: usize,
        kind: GeluKind,
    ) -> Result<Tensor<T>> {
        let d_pooled = self.backward_to_pooled(cache, d_output, kind);
        let (tokens, d) = cache.values.dims2()?;
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let d_mixed = Tensor::new([1, d], d_pooled)?;
        let d_attn = attention_grad(&d_mixed, &cache.values, heads)?;
        let d_values = value_grad(&cache.attn, &d_mixed)?;
        let mut d_keys = vec![T::zero(); tokens * d];
        for h in 0..heads {
            let probs = &cache.attn.data()[h * tokens..(h + 1) * tokens];
            let d_scores =
                softmax_backward_lane(probs, &d_attn.data()[h * tokens..(h + 1) * tokens]);
            for (j, &ds) in d_scores.iter().enumerate() {
                for c in h * dh..(h + 1) * dh {
                    d_keys[j * d + c] = ds * cache.query[c] * scale;
                }
            }
        }
        let d_keys = Tensor::new([tokens, d], d_keys)?;
        Ok(self
            .key
            .backward(&d_keys)?
            .add(&self.value.backward(&d_values)?)?)
    }
}

impl<T: Scalar> ModelBundle<T> {
    fn pooler_weights(&self) -> Result<&AttnPoolerWeights<T>> {
        self.weights.pooler.as_ref().ok_or(Error::WrongPooling {
            expected: "attn_pooler",
            actual: self.config.pooling.name(),
        })
    }

    /// Gradient w.r.t. the pooled vector, through the output projection.
    fn backward_projection(&self, d_embedding: &[T]) -> Vec<T> {
        match &self.weights.proj {
            Some(p) => {
                let cols = p.shape()[1];
                (0..p.shape()[0])
                    .map(|k| dot(&p.data()[k * cols..(k + 1) * cols], d_embedding))
                    .collect()
            }
            None => d_embedding.to_vec(),
        }
    }

    /// Gradient of a scalar w.r.t. the token matrix `tokens` that produced
    /// `pass`, given its gradient w.r.t. the embedding.
    pub fn head_backward(
        &self,
        tokens: &Tensor<T>,
        pass: &HeadPass<T>,
        d_embedding: &[T],
    ) -> Result<Tensor<T>> {
        let d_pooled = self.backward_projection(d_embedding);
        let (rows, d) = tokens.dims2()?;
        match &pass.cache {
            HeadCache::Cls { token } => {
                let d_token = match &self.weights.norm {
                    Some(n) => n.backward_vec(token, &d_pooled),
                    None => d_pooled,
                };
                let mut out = vec![T::zero(); rows * d];
                out[..d].copy_from_slice(&d_token);
                Ok(Tensor::new([rows, d], out)?)
            }
            HeadCache::Pooler(cache) => {
                let d_inputs = self.pooler_weights()?.backward_to_inputs(
                    cache,
                    &d_pooled,
                    self.config.pooler_heads(),
                    self.config.gelu,
                )?;
                match &self.weights.norm {
                    Some(n) => Ok(n.backward(tokens, &d_inputs)?),
                    None => Ok(d_inputs),
                }
            }
        }
    }

    /// Gradient w.r.t. the pooler attention map of `pass`.
    pub fn head_backward_to_pooler_attention(
        &self,
        pass: &HeadPass<T>,
        d_embedding: &[T],
    ) -> Result<Tensor<T>> {
        if self.config.pooling != Pooling::AttnPooler {
            return Err(Error::WrongPooling {
                expected: "attn_pooler",
                actual: self.config.pooling.name(),
            });
        }
        let HeadCache::Pooler(cache) = &pass.cache else {
            return Err(Error::WrongPooling {
                expected: "attn_pooler",
                actual: "cls_token",
            });
        };
        let d_pooled = self.backward_projection(d_embedding);
        self.pooler_weights()?.backward_to_attention(
            cache,
            &d_pooled,
            self.config.pooler_heads(),
            self.config.gelu,
        )
    }

    /// Back-propagates `d Z^l` through the MLP half and the attention output
    /// projection of layer `l`. Returns `(d A^l, d Z_hat)`; `A^l` is treated
    /// as a leaf, so nothing flows into the queries or keys.
    pub fn block_backward_to_attention(
        &self,
        l: usize,
        cache: &BlockCache<T>,
        d_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let block = &self.weights.blocks[l - 1];
        let kind = self.config.gelu;
        let d_act = block.fc2.backward(d_out)?;
        let d_hidden = d_act.mul(&cache.hidden.map(|h| gelu_grad(h, kind)))?;
        let d_normed2 = block.fc1.backward(&d_hidden)?;
        let d_resid = block.norm2.backward(&cache.resid, &d_normed2)?.add(d_out)?;
        let d_mixed = block.proj.backward(&d_resid)?;
        let d_attn = attention_grad(&d_mixed, &cache.v, self.config.heads)?;
        Ok((d_attn, d_resid))
    }

    /// Full input gradient of layer `l`: `d Z^{l-1}` from `d Z^l`.
    pub fn block_backward(
        &self,
        l: usize,
        cache: &BlockCache<T>,
        x: &Tensor<T>,
        d_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let block = &self.weights.blocks[l - 1];
        let heads = self.config.heads;
        let (d_attn, d_resid) = self.block_backward_to_attention(l, cache, d_out)?;
        let d_mixed = block.proj.backward(&d_resid)?;
        let d_v = value_grad(&cache.attn, &d_mixed)?;
        let (tokens, d) = cache.q.dims2()?;
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut d_q = vec![T::zero(); tokens * d];
        let mut d_k = vec![T::zero(); tokens * d];
        for h in 0..heads {
            for i in 0..tokens {
                let base = (h * tokens + i) * tokens;
                let d_scores = softmax_backward_lane(
                    &cache.attn.data()[base..base + tokens],
                    &d_attn.data()[base..base + tokens],
                );
                let qi = &cache.q.row(i)[h * dh..(h + 1) * dh];
                for (j, &ds) in d_scores.iter().enumerate() {
                    let ds = ds * scale;
                    let kj = &cache.k.row(j)[h * dh..(h + 1) * dh];
                    for c in 0..dh {
                        d_q[i * d + h * dh + c] = d_q[i * d + h * dh + c] + ds * kj[c];
                        d_k[j * d + h * dh + c] = d_k[j * d + h * dh + c] + ds * qi[c];
                    }
                }
            }
        }
        let mut d_qkv = Vec::with_capacity(tokens * 3 * d);
        for i in 0..tokens {
            d_qkv.extend_from_slice(&d_q[i * d..(i + 1) * d]);
            d_qkv.extend_from_slice(&d_k[i * d..(i + 1) * d]);
            d_qkv.extend_from_slice(d_v.row(i));
        }
        let d_normed = block.qkv.backward(&Tensor::new([tokens, 3 * d], d_qkv)?)?;
        Ok(block.norm1.backward(x, &d_normed)?.add(&d_resid)?)
    }
}
