//! Deterministic tiny models and the finite-difference battery.
//!
//! Every weight tensor draws from its own ChaCha8 stream: the generator is
//! seeded with `seed` and the stream id is the FNV-1a 64 hash of the tensor
//! name. Adding or renaming one tensor never shifts the values of another.

mod battery;
mod parity;

pub use battery::{
    default_battery, fd_step_sensitivity, relative_error, run_fd_battery, run_fd_battery_with,
    AnalyticGrad, BatteryConfig, BatteryReport, BatteryRow, FD_EPS, REL_ERROR_FLOOR,
};
pub use parity::{check_parity, ParityReport, PARITY_INPUT, PARITY_LOGITS, PARITY_TOKENS};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::model::{
    AttnPoolerWeights, Block, Classifier, ClassifierKind, LayerNorm, Linear, ModelBundle, Pooling,
    PreprocessConfig, ViTConfig, ViTWeights, EMPTY_PROMPT_EMBEDDING,
};
use crate::tensor::{GeluKind, Scalar, Tensor};

/// Labels of the text classifier attached to tiny models, in column order.
pub const TINY_LABELS: [&str; 5] = ["cat", "dog", "car", "tree", "sky"];

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Uniform values in `[-1, 1)` from the stream named `name`: the top 53 bits
/// of each `next_u64` form `u` in `[0, 1)`, mapped to `2u - 1`.
pub fn uniform_stream(seed: u64, name: &str, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(name.as_bytes()));
    (0..len)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            2.0 * u - 1.0
        })
        .collect()
}

/// Shape of a generated model.
#[derive(Debug, Clone, PartialEq)]
pub struct TinySpec {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patches: usize,
    pub pooling: Pooling,
    pub patch_size: usize,
    pub gelu: GeluKind,
}

impl TinySpec {
    pub fn new(
        seed: u64,
        layers: usize,
        heads: usize,
        width: usize,
        patches: usize,
        pooling: Pooling,
    ) -> Self {
        Self {
            seed,
            layers,
            heads,
            width,
            patches,
            pooling,
            patch_size: 4,
            gelu: GeluKind::Tanh,
        }
    }

    pub fn config(&self) -> ViTConfig {
        let side = (self.patches as f64).sqrt().round() as usize;
        ViTConfig {
            layers: self.layers,
            heads: self.heads,
            width: self.width,
            patch_size: self.patch_size,
            image_size: side * self.patch_size,
            mlp_ratio: 2.0,
            pooling: self.pooling,
            class_token: self.pooling == Pooling::ClsToken,
            ln_eps: 1e-5,
            gelu: self.gelu,
            pooler_heads: None,
        }
    }
}

struct Gen {
    seed: u64,
    scale: f64,
}

impl Gen {
    fn tensor<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let len = shape.iter().product();
        let data = uniform_stream(self.seed, name, len)
            .into_iter()
            .map(|v| T::from_f64(v * self.scale))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }

    fn linear<T: Scalar>(
        &self,
        prefix: &str,
        out: usize,
        inp: usize,
        bias: bool,
    ) -> Result<Linear<T>> {
        Ok(Linear {
            weight: self.tensor(&format!("{prefix}.weight"), &[out, inp])?,
            bias: if bias {
                Some(self.tensor(&format!("{prefix}.bias"), &[out])?)
            } else {
                None
            },
        })
    }

    /// Gain `1 + 0.5 u`, bias `0.5 u / sqrt(d)`.
    fn norm<T: Scalar>(&self, prefix: &str, d: usize, eps: f64) -> Result<LayerNorm<T>> {
        let gain = uniform_stream(self.seed, &format!("{prefix}.weight"), d)
            .into_iter()
            .map(|v| T::from_f64(1.0 + 0.5 * v))
            .collect();
        Ok(LayerNorm {
            gain: Tensor::new([d], gain)?,
            bias: self
                .tensor::<T>(&format!("{prefix}.bias"), &[d])?
                .scale(T::from_f64(0.5)),
            eps,
        })
    }
}

fn unit_columns(raw: Vec<f64>, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = raw;
    for c in 0..cols {
        let norm = (0..rows)
            .map(|r| out[r * cols + c].powi(2))
            .sum::<f64>()
            .sqrt();
        for r in 0..rows {
            out[r * cols + c] /= norm;
        }
    }
    out
}

/// Seeded random ViT with weights at scale `1 / sqrt(d)`.
///
/// Class-token models carry a text classifier (`"text"`) and a learned head
/// (`"head"`); pooler models drop the class token and carry a minimal
/// pooler. Both get an `"empty"` embedding for background suppression.
pub fn make_tiny_vit<T: Scalar>(spec: &TinySpec) -> Result<ModelBundle<T>> {
    let side = (spec.patches as f64).sqrt().round() as usize;
    if spec.patches == 0 || side * side != spec.patches {
        return Err(Error::Config(format!(
            "patch count {} is not a positive perfect square",
            spec.patches
        )));
    }
    let config = spec.config();
    config.validate()?;
    let d = config.width;
    let g = Gen {
        seed: spec.seed,
        scale: 1.0 / (d as f64).sqrt(),
    };
    let eps = config.ln_eps;
    let hidden = config.mlp_hidden();
    let blocks = (0..config.layers)
        .map(|l| {
            let p = format!("blocks.{l}");
            Ok(Block {
                norm1: g.norm(&format!("{p}.norm1"), d, eps)?,
                qkv: g.linear(&format!("{p}.attn.qkv"), 3 * d, d, true)?,
                proj: g.linear(&format!("{p}.attn.proj"), d, d, true)?,
                norm2: g.norm(&format!("{p}.norm2"), d, eps)?,
                fc1: g.linear(&format!("{p}.mlp.fc1"), hidden, d, true)?,
                fc2: g.linear(&format!("{p}.mlp.fc2"), d, hidden, true)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Patch pixels are O(1) and there are 3 p^2 of them.
    let patch_scale = T::from_f64((d as f64 / config.patch_dim() as f64).sqrt());
    let mut patch_embed = g.linear::<T>("patch_embed", d, config.patch_dim(), true)?;
    patch_embed.weight = patch_embed.weight.scale(patch_scale);
    let cls = config.pooling == Pooling::ClsToken;
    let pooler = if cls {
        None
    } else {
        Some(AttnPoolerWeights {
            query: g
                .tensor::<T>("pool.query", &[d])?
                .scale(T::from_f64((d as f64).sqrt())),
            query_proj: None,
            key: g.linear("pool.key", d, d, false)?,
            value: g.linear("pool.value", d, d, false)?,
            out: None,
            post: None,
        })
    };
    let weights = ViTWeights {
        patch_embed,
        cls_token: if cls {
            Some(g.tensor("cls_token", &[d])?)
        } else {
            None
        },
        pos_embed: g.tensor("pos_embed", &[config.num_tokens(), d])?,
        norm_pre: None,
        blocks,
        norm: Some(g.norm("norm", d, eps)?),
        proj: Some(g.tensor("proj", &[d, d])?),
        pooler,
    };
    let classes = TINY_LABELS.len();
    let text = unit_columns(
        uniform_stream(spec.seed, "classifier.text", d * classes),
        d,
        classes,
    );
    let mut classifiers = vec![Classifier {
        name: "text".into(),
        kind: ClassifierKind::TextEmbeddings,
        labels: TINY_LABELS.iter().map(|s| s.to_string()).collect(),
        weight: Tensor::new([d, classes], text.into_iter().map(T::from_f64).collect())?,
    }];
    if cls {
        classifiers.push(Classifier {
            name: "head".into(),
            kind: ClassifierKind::LearnedHead,
            labels: Vec::new(),
            weight: g.tensor("classifier.head", &[d, 3])?,
        });
    }
    let empty = unit_columns(uniform_stream(spec.seed, "embedding.empty", d), d, 1);
    let bundle = ModelBundle {
        config,
        weights,
        classifiers,
        embeddings: vec![(
            EMPTY_PROMPT_EMBEDDING.to_string(),
            Tensor::new([d], empty.into_iter().map(T::from_f64).collect())?,
        )],
        preprocess: PreprocessConfig::clip(),
        provenance: format!(
            "tiny-vit seed={} L={} h={} d={} n={} pooling={}",
            spec.seed,
            spec.layers,
            spec.heads,
            spec.width,
            spec.patches,
            spec.pooling.name()
        ),
    };
    // Round-trip through the container validates every shape.
    ModelBundle::from_container(&bundle.to_container()?)
}

/// Deterministic image tensor in roughly `[-2, 2]` for a given model.
pub fn random_image<T: Scalar>(seed: u64, size: usize) -> Result<Tensor<T>> {
    let data = uniform_stream(seed, "image", 3 * size * size)
        .into_iter()
        .map(|v| T::from_f64(2.0 * v))
        .collect();
    Ok(Tensor::new([3, size, size], data)?)
}
