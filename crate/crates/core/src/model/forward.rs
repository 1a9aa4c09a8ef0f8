//! Patch embedding, pre-LN transformer blocks, pooling heads and
//! classification, with every intermediate the backward pass needs kept in a
//! [`ForwardTrace`].

use super::config::Pooling;
use super::weights::{AttnPoolerWeights, Block, Classifier, ClassifierKind, ModelBundle};
use crate::error::{Error, Result};
use crate::tensor::{dot, gelu, softmax_in_place, GeluKind, Scalar, Tensor, TensorError};

/// Intermediates of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache<T> {
    /// `LN1(Z^{l-1})`.
    pub normed: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Post-softmax attention `[h, tokens, tokens]`.
    pub attn: Tensor<T>,
    /// Head outputs `A_h V_h`, concatenated to `[tokens, d]`.
    pub mixed: Tensor<T>,
    /// `Z_hat = proj(mixed) + Z^{l-1}`.
    pub resid: Tensor<T>,
    /// `LN2(Z_hat)`.
    pub normed2: Tensor<T>,
    /// MLP pre-activation.
    pub hidden: Tensor<T>,
}

/// Intermediates of the attentional pooler applied to one token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolerCache<T> {
    /// Tokens as seen by the pooler (after the final norm, if any).
    pub inputs: Tensor<T>,
    /// Effective query vector (after the optional query projection).
    pub query: Vec<T>,
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    /// Pooler attention `[h, 1, tokens]`.
    pub attn: Tensor<T>,
    pub pooled: Vec<T>,
    pub projected: Vec<T>,
    pub post_normed: Option<Vec<T>>,
    pub post_hidden: Option<Vec<T>>,
    pub output: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadCache<T> {
    Cls { token: Vec<T> },
    Pooler(Box<PoolerCache<T>>),
}

/// One pass of the embedding head (final norm, pooling, projection) over a
/// token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPass<T> {
    pub cache: HeadCache<T>,
    /// Pooled `[d]` vector before the output projection.
    pub pooled: Vec<T>,
    /// Image embedding `z_bar` in the classifier space.
    pub embedding: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// `Z^0 ..= Z^L`.
    pub tokens: Vec<Tensor<T>>,
    /// `blocks[l - 1]` belongs to layer `l`.
    pub blocks: Vec<BlockCache<T>>,
    /// Embedding-head pass over every `Z^l`, `l = 0..=L`.
    pub heads: Vec<HeadPass<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// `A^l` for `l` in `1..=L`.
    pub fn attention(&self, l: usize) -> &Tensor<T> {
        &self.blocks[l - 1].attn
    }

    pub fn attention_maps(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.blocks.iter().map(|b| &b.attn)
    }

    pub fn final_tokens(&self) -> &Tensor<T> {
        self.tokens.last().expect("trace holds Z^0")
    }

    /// Pooler attention computed on `Z^l`, if the model pools with attention.
    pub fn pooler_attention(&self, l: usize) -> Option<&Tensor<T>> {
        match &self.heads[l].cache {
            HeadCache::Pooler(p) => Some(&p.attn),
            HeadCache::Cls { .. } => None,
        }
    }
}

/// Linear readout `normalize?(z_bar) . c` for one classifier column.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHead<T> {
    pub column: Vec<T>,
    /// Unit-normalize the embedding first (text-embedding classifiers).
    pub normalize: bool,
}

impl<T: Scalar> ScoreHead<T> {
    pub fn score(&self, embedding: &[T]) -> T {
        if self.normalize {
            let norm = dot(embedding, embedding).sqrt();
            if norm == T::zero() {
                return T::zero();
            }
            // Same operation order as `classify`, so the two agree bitwise.
            let inv = T::one() / norm;
            embedding
                .iter()
                .zip(&self.column)
                .fold(T::zero(), |acc, (&e, &c)| acc + (e * inv) * c)
        } else {
            dot(embedding, &self.column)
        }
    }

    /// `d score / d embedding`.
    pub fn backward(&self, embedding: &[T]) -> Vec<T> {
        if !self.normalize {
            return self.column.clone();
        }
        let norm = dot(embedding, embedding).sqrt();
        if norm == T::zero() {
            return vec![T::zero(); embedding.len()];
        }
        let s = dot(embedding, &self.column) / norm;
        embedding
            .iter()
            .zip(&self.column)
            .map(|(&e, &c)| (c - s * e / norm) / norm)
            .collect()
    }
}

fn stage_error(layer: usize) -> impl Fn(TensorError) -> Error {
    move |e| match e {
        TensorError::NonFinite { op } => Error::NonFiniteActivation { layer, stage: op },
        other => Error::Tensor(other),
    }
}

/// Multi-head scaled dot-product attention weights for every query row.
fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (tokens, d) = q.dims2()?;
    let dh = d / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut attn = vec![T::zero(); heads * tokens * tokens];
    for h in 0..heads {
        for i in 0..tokens {
            let qi = &q.row(i)[h * dh..(h + 1) * dh];
            let lane = &mut attn[(h * tokens + i) * tokens..(h * tokens + i + 1) * tokens];
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = dot(qi, &k.row(j)[h * dh..(h + 1) * dh]) * scale;
            }
            softmax_in_place(lane);
        }
    }
    Ok(Tensor::new([heads, tokens, tokens], attn)?)
}

/// `out[i, h*dh + c] = sum_j A[h, i, j] V[j, h*dh + c]`.
pub(crate) fn mix_values<T: Scalar>(attn: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (heads, rows, cols) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    let (tokens, d) = v.dims2()?;
    if cols != tokens {
        return Err(TensorError::ShapeMismatch {
            op: "mix_values",
            left: attn.shape().to_vec(),
            right: v.shape().to_vec(),
        }
        .into());
    }
    let dh = d / heads;
    let mut out = vec![T::zero(); rows * d];
    for h in 0..heads {
        for i in 0..rows {
            let a = &attn.data()[(h * rows + i) * cols..(h * rows + i + 1) * cols];
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &w) in a.iter().enumerate() {
                for (slot, &vv) in o.iter_mut().zip(&v.row(j)[h * dh..(h + 1) * dh]) {
                    *slot = *slot + w * vv;
                }
            }
        }
    }
    Ok(Tensor::new([rows, d], out)?)
}

impl<T: Scalar> Block<T> {
    /// Pre-LN block: `Z_hat = MSA(LN1(Z)) + Z`, `Z' = MLP(LN2(Z_hat)) + Z_hat`.
    ///
    /// With `attn_override`, the post-softmax attention is replaced by the
    /// given map; this is how finite differences perturb `A^l` directly.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        heads: usize,
        gelu_kind: GeluKind,
        attn_override: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (_, d) = x.dims2()?;
        let normed = self.norm1.forward(x)?;
        let qkv = self.qkv.forward(&normed)?;
        let q = qkv.slice(1, 0, d)?;
        let k = qkv.slice(1, d, 2 * d)?;
        let v = qkv.slice(1, 2 * d, 3 * d)?;
        let attn = match attn_override {
            Some(a) => a.clone(),
            None => attention_weights(&q, &k, heads)?,
        };
        let mixed = mix_values(&attn, &v)?;
        let resid = self.proj.forward(&mixed)?.add(x)?;
        let normed2 = self.norm2.forward(&resid)?;
        let hidden = self.fc1.forward(&normed2)?;
        let out = self.fc2.forward(&hidden.gelu(gelu_kind))?.add(&resid)?;
        Ok((
            out,
            BlockCache {
                normed,
                q,
                k,
                v,
                attn,
                mixed,
                resid,
                normed2,
                hidden,
            },
        ))
    }
}

impl<T: Scalar> AttnPoolerWeights<T> {
    /// Single learned query attending over `tokens`:
    /// `softmax(q . (Z W_K^T)^T / sqrt(d_head)) (Z W_V^T)` per head, followed
    /// by whichever optional projections the weights carry.
    pub fn forward(
        &self,
        tokens: &Tensor<T>,
        heads: usize,
        gelu_kind: GeluKind,
        attn_override: Option<&Tensor<T>>,
    ) -> Result<PoolerCache<T>> {
        let (n, d) = tokens.dims2()?;
        let dh = d / heads;
        let query = match &self.query_proj {
            Some(p) => p.forward_vec(self.query.data()),
            None => self.query.data().to_vec(),
        };
        let keys = self.key.forward(tokens)?;
        let values = self.value.forward(tokens)?;
        let attn = match attn_override {
            Some(a) => a.clone(),
            None => {
                let scale = T::one() / T::from_f64(dh as f64).sqrt();
                let mut a = vec![T::zero(); heads * n];
                for h in 0..heads {
                    let lane = &mut a[h * n..(h + 1) * n];
                    for (j, slot) in lane.iter_mut().enumerate() {
                        *slot = dot(
                            &query[h * dh..(h + 1) * dh],
                            &keys.row(j)[h * dh..(h + 1) * dh],
                        ) * scale;
                    }
                    softmax_in_place(lane);
                }
                Tensor::new([heads, 1, n], a)?
            }
        };
        let pooled = mix_values(&attn, &values)?.into_data();
        let projected = match &self.out {
            Some(o) => o.forward_vec(&pooled),
            None => pooled.clone(),
        };
        let (post_normed, post_hidden, output) = match &self.post {
            Some(post) => {
                let normed = post.norm.forward_vec(&projected);
                let hidden = post.fc1.forward_vec(&normed);
                let act: Vec<T> = hidden.iter().map(|&h| gelu(h, gelu_kind)).collect();
                let out: Vec<T> = post
                    .fc2
                    .forward_vec(&act)
                    .iter()
                    .zip(&projected)
                    .map(|(&m, &r)| m + r)
                    .collect();
                (Some(normed), Some(hidden), out)
            }
            None => (None, None, projected.clone()),
        };
        if output.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "attn_pooler" }.into());
        }
        Ok(PoolerCache {
            inputs: tokens.clone(),
            query,
            keys,
            values,
            attn,
            pooled,
            projected,
            post_normed,
            post_hidden,
            output,
        })
    }
}

impl<T: Scalar> ModelBundle<T> {
    /// Patch embedding plus class token and positional embeddings: `Z^0`.
    /// Patches are taken in row-major order.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let s = cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                left: image.shape().to_vec(),
                right: vec![3, s, s],
            }
            .into());
        }
        let p = cfg.patch_size;
        let g = cfg.grid_side();
        let mut patches = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
        for py in 0..g {
            for px in 0..g {
                for c in 0..3 {
                    for y in 0..p {
                        let row = (c * s + py * p + y) * s + px * p;
                        patches.extend_from_slice(&image.data()[row..row + p]);
                    }
                }
            }
        }
        let patches = Tensor::new([cfg.num_patches(), cfg.patch_dim()], patches)?;
        let embedded = self.weights.patch_embed.forward(&patches)?;
        let d = cfg.width;
        let mut z = Vec::with_capacity(cfg.num_tokens() * d);
        if let Some(cls) = &self.weights.cls_token {
            z.extend_from_slice(cls.data());
        }
        z.extend_from_slice(embedded.data());
        let z = Tensor::new([cfg.num_tokens(), d], z)?.add(&self.weights.pos_embed)?;
        match &self.weights.norm_pre {
            Some(n) => Ok(n.forward(&z)?),
            None => Ok(z),
        }
    }

    /// Runs layer `l` (1-based) on `x = Z^{l-1}`.
    pub fn block_forward(
        &self,
        l: usize,
        x: &Tensor<T>,
        attn_override: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        self.weights.blocks[l - 1]
            .forward(x, self.config.heads, self.config.gelu, attn_override)
            .map_err(|e| match e {
                Error::Tensor(t) => stage_error(l)(t),
                other => other,
            })
    }

    /// Embedding head over a full token matrix: final norm, pooling, projection.
    pub fn head_forward(&self, tokens: &Tensor<T>) -> Result<HeadPass<T>> {
        self.head_forward_with(tokens, None)
    }

    /// As [`Self::head_forward`], optionally replacing the pooler attention.
    pub fn head_forward_with(
        &self,
        tokens: &Tensor<T>,
        pooler_override: Option<&Tensor<T>>,
    ) -> Result<HeadPass<T>> {
        let (cache, pooled) = match self.config.pooling {
            Pooling::ClsToken => {
                let token = tokens.row(0).to_vec();
                let pooled = match &self.weights.norm {
                    Some(n) => n.forward_vec(&token),
                    None => token.clone(),
                };
                (HeadCache::Cls { token }, pooled)
            }
            Pooling::AttnPooler => {
                let pooler = self.weights.pooler.as_ref().ok_or(Error::WrongPooling {
                    expected: "attn_pooler",
                    actual: "cls_token",
                })?;
                let inputs = match &self.weights.norm {
                    Some(n) => n.forward(tokens)?,
                    None => tokens.clone(),
                };
                let cache = pooler.forward(
                    &inputs,
                    self.config.pooler_heads(),
                    self.config.gelu,
                    pooler_override,
                )?;
                let pooled = cache.output.clone();
                (HeadCache::Pooler(Box::new(cache)), pooled)
            }
        };
        let embedding = self.project(&pooled);
        Ok(HeadPass {
            cache,
            pooled,
            embedding,
        })
    }

    fn project(&self, pooled: &[T]) -> Vec<T> {
        match &self.weights.proj {
            Some(p) => {
                let cols = p.shape()[1];
                (0..cols)
                    .map(|j| {
                        pooled
                            .iter()
                            .enumerate()
                            .fold(T::zero(), |acc, (k, &v)| acc + v * p.data()[k * cols + j])
                    })
                    .collect()
            }
            None => pooled.to_vec(),
        }
    }

    /// Full forward from `Z^0`, capturing every `Z^l`, `A^l` and head pass.
    pub fn forward_trace(&self, z0: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let cfg = &self.config;
        if z0.shape() != [cfg.num_tokens(), cfg.width] {
            return Err(TensorError::ShapeMismatch {
                op: "forward_trace",
                left: z0.shape().to_vec(),
                right: vec![cfg.num_tokens(), cfg.width],
            }
            .into());
        }
        z0.check_finite("embed").map_err(stage_error(0))?;
        let mut tokens = Vec::with_capacity(cfg.layers + 1);
        let mut blocks = Vec::with_capacity(cfg.layers);
        tokens.push(z0.clone());
        for l in 1..=cfg.layers {
            let (z, cache) = self.block_forward(l, &tokens[l - 1], None)?;
            z.check_finite("block_output").map_err(stage_error(l))?;
            tokens.push(z);
            blocks.push(cache);
        }
        let heads = tokens
            .iter()
            .enumerate()
            .map(|(l, z)| {
                self.head_forward(z).map_err(|e| match e {
                    Error::Tensor(t) => stage_error(l)(t),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardTrace {
            tokens,
            blocks,
            heads,
        })
    }

    /// Image tensor straight to the final embedding.
    pub fn image_embedding(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut z = self.embed(image)?;
        for l in 1..=self.config.layers {
            z = self.block_forward(l, &z, None)?.0;
        }
        Ok(self.head_forward(&z)?.embedding)
    }

    /// `z_bar` from the class token of the final layer.
    pub fn pool_cls(&self, trace: &ForwardTrace<T>) -> Result<Vec<T>> {
        if self.config.pooling != Pooling::ClsToken {
            return Err(Error::WrongPooling {
                expected: "cls_token",
                actual: self.config.pooling.name(),
            });
        }
        Ok(trace
            .heads
            .last()
            .expect("trace holds Z^L")
            .embedding
            .clone())
    }

    /// Attentional pooling of a token matrix (no final norm, no output
    /// projection). Returns the pooled vector and the `[h, 1, tokens]` map.
    pub fn pool_attn(&self, tokens: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let pooler = self.weights.pooler.as_ref().ok_or(Error::WrongPooling {
            expected: "attn_pooler",
            actual: self.config.pooling.name(),
        })?;
        let cache = pooler.forward(tokens, self.config.pooler_heads(), self.config.gelu, None)?;
        Ok((cache.output, cache.attn))
    }

    /// Scores `z_bar . C`; text-embedding classifiers see a unit-normalized `z_bar`.
    pub fn classify(&self, embedding: &[T], classifier: &Classifier<T>) -> Result<Vec<T>> {
        let (rows, cols) = classifier.weight.dims2()?;
        if embedding.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "classify",
                left: vec![embedding.len()],
                right: classifier.weight.shape().to_vec(),
            }
            .into());
        }
        let e = Tensor::new([1, rows], embedding.to_vec())?;
        let e = if classifier.kind == ClassifierKind::TextEmbeddings {
            let norm = dot(embedding, embedding).sqrt();
            if norm == T::zero() {
                return Ok(vec![T::zero(); cols]);
            }
            e.scale(T::one() / norm)
        } else {
            e
        };
        Ok(e.matmul(&classifier.weight)?.into_data())
    }
}
