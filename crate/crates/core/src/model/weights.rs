//! Weight structures and their mapping onto the container tensor-name schema
//! (documented in `docs/weights.md`).

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::config::{PreprocessConfig, ViTConfig};
use super::layers::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, TensorContainer};

pub const LAYOUT_TAG: &str = "legrad-vit-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    /// Fused projection `[3d, d]`; rows `0..d` are Q, `d..2d` K, `2d..3d` V.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Residual `x + fc2(gelu(fc1(norm(x))))` applied after the pooler's
/// attention in the generalized (SigLIP-style) head.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolerMlp<T> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Learned-query attention pooler. The minimal form is `query`, `key`,
/// `value` without biases; the remaining fields are the optional extras
/// real checkpoints carry.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnPoolerWeights<T> {
    pub query: Tensor<T>,
    pub query_proj: Option<Linear<T>>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Option<Linear<T>>,
    pub post: Option<PoolerMlp<T>>,
}

impl<T: Scalar> AttnPoolerWeights<T> {
    pub fn is_minimal(&self) -> bool {
        self.query_proj.is_none()
            && self.key.bias.is_none()
            && self.value.bias.is_none()
            && self.out.is_none()
            && self.post.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights<T> {
    /// Patch kernel flattened to `[d, 3 * p * p]` in (channel, row, col) order.
    pub patch_embed: Linear<T>,
    pub cls_token: Option<Tensor<T>>,
    pub pos_embed: Tensor<T>,
    pub norm_pre: Option<LayerNorm<T>>,
    pub blocks: Vec<Block<T>>,
    /// Final norm, applied to whatever tokens feed the embedding head.
    pub norm: Option<LayerNorm<T>>,
    /// Output projection `[d, d_embed]`, applied as `z . proj`.
    pub proj: Option<Tensor<T>>,
    pub pooler: Option<AttnPoolerWeights<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    LearnedHead,
    TextEmbeddings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub name: String,
    pub kind: ClassifierKind,
    pub labels: Vec<String>,
    /// `[d_embed, classes]`, one column per class.
    pub weight: Tensor<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        let (rows, cols) = (self.weight.shape()[0], self.weight.shape()[1]);
        (0..rows)
            .map(|r| self.weight.data()[r * cols + c])
            .collect()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    fn validate(&self, embed_dim: usize) -> Result<()> {
        let bad = |reason: String| Error::Classifier {
            name: self.name.clone(),
            reason,
        };
        if self.weight.rank() != 2 || self.weight.shape()[0] != embed_dim {
            return Err(bad(format!(
                "shape {:?} does not match embedding width {embed_dim}",
                self.weight.shape()
            )));
        }
        if !self.labels.is_empty() && self.labels.len() != self.num_classes() {
            return Err(bad(format!(
                "{} labels for {} columns",
                self.labels.len(),
                self.num_classes()
            )));
        }
        self.weight
            .check_finite("classifier")
            .map_err(|_| Error::NonFiniteWeight(format!("classifier.{}", self.name)))?;
        if self.kind == ClassifierKind::TextEmbeddings {
            for c in 0..self.num_classes() {
                let norm = self
                    .column(c)
                    .iter()
                    .map(|v| v.as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if (norm - 1.0).abs() > 1e-4 {
                    return Err(bad(format!(
                        "column {c} has norm {norm}, expected unit norm"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierMeta {
    name: String,
    kind: ClassifierKind,
    #[serde(default)]
    labels: Vec<String>,
}

/// Everything needed to run and explain one model. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ViTConfig,
    pub weights: ViTWeights<T>,
    pub classifiers: Vec<Classifier<T>>,
    /// Free-standing embeddings addressable by name, e.g. the empty prompt.
    pub embeddings: Vec<(String, Tensor<T>)>,
    pub preprocess: PreprocessConfig,
    pub provenance: String,
}

/// Name of the embedding holding the non-informative prompt used for
/// background suppression.
pub const EMPTY_PROMPT_EMBEDDING: &str = "empty";

struct Reader<'a> {
    container: &'a TensorContainer,
}

impl Reader<'_> {
    fn optional<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Option<Tensor<T>>> {
        let Some(t) = self.container.get(name) else {
            return Ok(None);
        };
        if t.shape() != shape {
            return Err(Error::WeightShape {
                name: name.into(),
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        let t = t.to_scalar::<T>();
        t.check_finite("load")
            .map_err(|_| Error::NonFiniteWeight(name.into()))?;
        Ok(Some(t))
    }

    fn required<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        self.optional(name, shape)?
            .ok_or_else(|| Error::MissingTensor(name.into()))
    }

    fn linear<T: Scalar>(&self, prefix: &str, out: usize, inp: usize) -> Result<Linear<T>> {
        Ok(Linear {
            weight: self.required(&format!("{prefix}.weight"), &[out, inp])?,
            bias: self.optional(&format!("{prefix}.bias"), &[out])?,
        })
    }

    fn optional_linear<T: Scalar>(
        &self,
        prefix: &str,
        out: usize,
        inp: usize,
    ) -> Result<Option<Linear<T>>> {
        if self.container.get(&format!("{prefix}.weight")).is_none() {
            return Ok(None);
        }
        self.linear(prefix, out, inp).map(Some)
    }

    fn norm<T: Scalar>(&self, prefix: &str, d: usize, eps: f64) -> Result<LayerNorm<T>> {
        Ok(LayerNorm {
            gain: self.required(&format!("{prefix}.weight"), &[d])?,
            bias: self.required(&format!("{prefix}.bias"), &[d])?,
            eps,
        })
    }

    fn optional_norm<T: Scalar>(
        &self,
        prefix: &str,
        d: usize,
        eps: f64,
    ) -> Result<Option<LayerNorm<T>>> {
        if self.container.get(&format!("{prefix}.weight")).is_none() {
            return Ok(None);
        }
        self.norm(prefix, d, eps).map(Some)
    }
}

fn meta_field<D: for<'de> Deserialize<'de>>(meta: &Map<String, Value>, key: &str) -> Result<D> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Config(format!("container metadata lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("metadata {key:?}: {e}")))
}

impl<T: Scalar> ModelBundle<T> {
    pub fn embed_dim(&self) -> usize {
        match &self.weights.proj {
            Some(p) => p.shape()[1],
            None => self.config.width,
        }
    }

    pub fn classifier(&self, name: Option<&str>) -> Result<&Classifier<T>> {
        match name {
            None => self
                .classifiers
                .first()
                .ok_or_else(|| Error::UnknownClassifier("<default>".into())),
            Some(n) => self
                .classifiers
                .iter()
                .find(|c| c.name == n)
                .ok_or_else(|| Error::UnknownClassifier(n.into())),
        }
    }

    pub fn embedding(&self, name: &str) -> Option<&Tensor<T>> {
        self.embeddings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }

    pub fn from_container(container: &TensorContainer) -> Result<Self> {
        let meta = &container.metadata;
        let config: ViTConfig = meta_field(meta, "model")?;
        config.validate()?;
        let preprocess: PreprocessConfig = meta_field(meta, "preprocess")?;
        let provenance = meta
            .get("provenance")
            .and_then(Value::as_str)
            .unwrap_or("unknown")
            .to_string();
        if let Some(order) = meta.get("patch_order").and_then(Value::as_str) {
            if order != "row-major" {
                return Err(Error::Config(format!("unsupported patch order {order:?}")));
            }
        }

        let r = Reader { container };
        let d = config.width;
        let eps = config.ln_eps;
        let p = config.patch_size;
        let tokens = config.num_tokens();
        let hidden = config.mlp_hidden();

        let kernel: Tensor<T> = r.required("patch_embed.weight", &[d, 3, p, p])?;
        let patch_embed = Linear {
            weight: kernel.reshape([d, 3 * p * p])?,
            bias: r.optional("patch_embed.bias", &[d])?,
        };
        let cls_token = if config.class_token {
            Some(r.required("cls_token", &[d])?)
        } else {
            None
        };
        let pos_embed = r.required("pos_embed", &[tokens, d])?;
        let norm_pre = r.optional_norm("norm_pre", d, eps)?;
        let blocks = (0..config.layers)
            .map(|l| {
                let b = format!("blocks.{l}");
                Ok(Block {
                    norm1: r.norm(&format!("{b}.norm1"), d, eps)?,
                    qkv: r.linear(&format!("{b}.attn.qkv"), 3 * d, d)?,
                    proj: r.linear(&format!("{b}.attn.proj"), d, d)?,
                    norm2: r.norm(&format!("{b}.norm2"), d, eps)?,
                    fc1: r.linear(&format!("{b}.mlp.fc1"), hidden, d)?,
                    fc2: r.linear(&format!("{b}.mlp.fc2"), d, hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = r.optional_norm("norm", d, eps)?;
        let proj = match container.get("proj") {
            Some(t) if t.shape().len() == 2 && t.shape()[0] == d => {
                Some(r.required("proj", &[d, t.shape()[1]])?)
            }
            Some(t) => {
                return Err(Error::WeightShape {
                    name: "proj".into(),
                    expected: vec![d, 0],
                    actual: t.shape().to_vec(),
                })
            }
            None => None,
        };
        let pooler = match config.pooling {
            super::Pooling::ClsToken => None,
            super::Pooling::AttnPooler => {
                let post = match r.optional_norm("pool.post.norm", d, eps)? {
                    Some(norm) => {
                        let h = container
                            .get("pool.post.fc1.weight")
                            .map(|t| t.shape()[0])
                            .ok_or_else(|| Error::MissingTensor("pool.post.fc1.weight".into()))?;
                        Some(PoolerMlp {
                            norm,
                            fc1: r.linear("pool.post.fc1", h, d)?,
                            fc2: r.linear("pool.post.fc2", d, h)?,
                        })
                    }
                    None => None,
                };
                Some(AttnPoolerWeights {
                    query: r.required("pool.query", &[d])?,
                    query_proj: r.optional_linear("pool.query_proj", d, d)?,
                    key: r.linear("pool.key", d, d)?,
                    value: r.linear("pool.value", d, d)?,
                    out: r.optional_linear("pool.out", d, d)?,
                    post,
                })
            }
        };
        let weights = ViTWeights {
            patch_embed,
            cls_token,
            pos_embed,
            norm_pre,
            blocks,
            norm,
            proj,
            pooler,
        };
        let embed_dim = weights.proj.as_ref().map_or(d, |p| p.shape()[1]);

        let classifier_meta: Vec<ClassifierMeta> = match meta.get("classifiers") {
            Some(_) => meta_field(meta, "classifiers")?,
            None => Vec::new(),
        };
        let mut classifiers = Vec::with_capacity(classifier_meta.len());
        for cm in classifier_meta {
            let name = format!("classifier.{}", cm.name);
            let t = container
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let weight = r.required::<T>(&name, t.shape())?;
            let c = Classifier {
                name: cm.name,
                kind: cm.kind,
                labels: cm.labels,
                weight,
            };
            c.validate(embed_dim)?;
            classifiers.push(c);
        }
        let embedding_names: Vec<String> = match meta.get("embeddings") {
            Some(_) => meta_field(meta, "embeddings")?,
            None => Vec::new(),
        };
        let embeddings = embedding_names
            .into_iter()
            .map(|n| {
                let t = r.required::<T>(&format!("embedding.{n}"), &[embed_dim])?;
                Ok((n, t))
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config,
            weights,
            classifiers,
            embeddings,
            preprocess,
            provenance,
        })
    }

    /// Serializes the bundle in its own element type.
    pub fn to_container(&self) -> Result<TensorContainer> {
        let classifiers: Vec<ClassifierMeta> = self
            .classifiers
            .iter()
            .map(|c| ClassifierMeta {
                name: c.name.clone(),
                kind: c.kind,
                labels: c.labels.clone(),
            })
            .collect();
        let meta = json!({
            "layout": LAYOUT_TAG,
            "model": self.config,
            "preprocess": self.preprocess,
            "patch_order": "row-major",
            "provenance": self.provenance,
            "classifiers": classifiers,
            "embeddings": self.embeddings.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        });
        let Value::Object(meta) = meta else {
            unreachable!("json! object literal")
        };
        let mut c = TensorContainer::new(meta);
        let w = &self.weights;
        let d = self.config.width;
        let p = self.config.patch_size;
        let push_linear = |c: &mut TensorContainer, prefix: &str, l: &Linear<T>| -> Result<()> {
            c.push(format!("{prefix}.weight"), T::wrap(l.weight.clone()))?;
            if let Some(b) = &l.bias {
                c.push(format!("{prefix}.bias"), T::wrap(b.clone()))?;
            }
            Ok(())
        };
        let push_norm = |c: &mut TensorContainer, prefix: &str, n: &LayerNorm<T>| -> Result<()> {
            c.push(format!("{prefix}.weight"), T::wrap(n.gain.clone()))?;
            c.push(format!("{prefix}.bias"), T::wrap(n.bias.clone()))?;
            Ok(())
        };
        c.push(
            "patch_embed.weight",
            T::wrap(w.patch_embed.weight.reshape([d, 3, p, p])?),
        )?;
        if let Some(b) = &w.patch_embed.bias {
            c.push("patch_embed.bias", T::wrap(b.clone()))?;
        }
        if let Some(t) = &w.cls_token {
            c.push("cls_token", T::wrap(t.clone()))?;
        }
        c.push("pos_embed", T::wrap(w.pos_embed.clone()))?;
        if let Some(n) = &w.norm_pre {
            push_norm(&mut c, "norm_pre", n)?;
        }
        for (l, b) in w.blocks.iter().enumerate() {
            let pre = format!("blocks.{l}");
            push_norm(&mut c, &format!("{pre}.norm1"), &b.norm1)?;
            push_linear(&mut c, &format!("{pre}.attn.qkv"), &b.qkv)?;
            push_linear(&mut c, &format!("{pre}.attn.proj"), &b.proj)?;
            push_norm(&mut c, &format!("{pre}.norm2"), &b.norm2)?;
            push_linear(&mut c, &format!("{pre}.mlp.fc1"), &b.fc1)?;
            push_linear(&mut c, &format!("{pre}.mlp.fc2"), &b.fc2)?;
        }
        if let Some(n) = &w.norm {
            push_norm(&mut c, "norm", n)?;
        }
        if let Some(pj) = &w.proj {
            c.push("proj", T::wrap(pj.clone()))?;
        }
        if let Some(pool) = &w.pooler {
            c.push("pool.query", T::wrap(pool.query.clone()))?;
            if let Some(q) = &pool.query_proj {
                push_linear(&mut c, "pool.query_proj", q)?;
            }
            push_linear(&mut c, "pool.key", &pool.key)?;
            push_linear(&mut c, "pool.value", &pool.value)?;
            if let Some(o) = &pool.out {
                push_linear(&mut c, "pool.out", o)?;
            }
            if let Some(post) = &pool.post {
                push_norm(&mut c, "pool.post.norm", &post.norm)?;
                push_linear(&mut c, "pool.post.fc1", &post.fc1)?;
                push_linear(&mut c, "pool.post.fc2", &post.fc2)?;
            }
        }
        for cl in &self.classifiers {
            c.push(
                format!("classifier.{}", cl.name),
                T::wrap(cl.weight.clone()),
            )?;
        }
        for (n, e) in &self.embeddings {
            c.push(format!("embedding.{n}"), T::wrap(e.clone()))?;
        }
        Ok(c)
    }

    /// Same weights in another element type.
    pub fn cast<U: Scalar>(&self) -> Result<ModelBundle<U>> {
        ModelBundle::from_container(&self.to_container()?)
    }
}
