//! Straight-line reference implementations used as oracles. Everything here
//! works on plain nested `Vec<f64>` and shares no code with the engine beyond
//! reading weight tensors.
#![allow(dead_code)]

use legrad_core::fixtures::{make_tiny_vit, random_image, TinySpec};
use legrad_core::model::{Block, LayerNorm, ModelBundle, Pooling};
use legrad_core::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn tiny(
    seed: u64,
    layers: usize,
    heads: usize,
    width: usize,
    patches: usize,
    pooling: Pooling,
) -> ModelBundle<f64> {
    make_tiny_vit(&TinySpec::new(seed, layers, heads, width, patches, pooling)).unwrap()
}

pub fn image_for(bundle: &ModelBundle<f64>, seed: u64) -> Tensor<f64> {
    random_image(seed, bundle.config.image_size).unwrap()
}

pub fn to_rows(t: &Tensor<f64>) -> Rows {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn linear(w: &Tensor<f64>, b: Option<&Tensor<f64>>, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| {
            let mut s = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..inp {
                s += w.data()[o * inp + i] * x[i];
            }
            s
        })
        .collect()
}

pub fn layer_norm(ln: &LayerNorm<f64>, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + ln.eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * ln.gain.data()[i] + ln.bias.data()[i])
        .collect()
}

pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Patch-embedded tokens with the class token and positional embeddings.
pub fn embed(bundle: &ModelBundle<f64>, image: &Tensor<f64>) -> Rows {
    let cfg = &bundle.config;
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let g = s / p;
    let px = |c: usize, y: usize, x: usize| image.data()[(c * s + y) * s + x];
    let mut rows = Vec::new();
    if let Some(cls) = &bundle.weights.cls_token {
        rows.push(cls.data().to_vec());
    }
    for gy in 0..g {
        for gx in 0..g {
            let mut flat = Vec::new();
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        flat.push(px(c, gy * p + y, gx * p + x));
                    }
                }
            }
            let pe = &bundle.weights.patch_embed;
            rows.push(linear(&pe.weight, pe.bias.as_ref(), &flat));
        }
    }
    let pos = to_rows(&bundle.weights.pos_embed);
    for (r, p) in rows.iter_mut().zip(pos) {
        for (v, q) in r.iter_mut().zip(p) {
            *v += q;
        }
    }
    rows
}

/// One pre-LN block; returns the new tokens and `A[h][i][j]`.
pub fn block(b: &Block<f64>, heads: usize, x: &Rows) -> (Rows, Vec<Rows>) {
    let t = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let qkv: Rows = x
        .iter()
        .map(|r| linear(&b.qkv.weight, b.qkv.bias.as_ref(), &layer_norm(&b.norm1, r)))
        .collect();
    let mut attn = vec![vec![vec![0.0; t]; t]; heads];
    let mut mixed = vec![vec![0.0; d]; t];
    for h in 0..heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    (0..dh)
                        .map(|c| qkv[i][h * dh + c] * qkv[j][d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            attn[h][i] = softmax(&logits);
            for j in 0..t {
                for c in 0..dh {
                    mixed[i][h * dh + c] += attn[h][i][j] * qkv[j][2 * d + h * dh + c];
                }
            }
        }
    }
    let out = (0..t)
        .map(|i| {
            let proj = linear(&b.proj.weight, b.proj.bias.as_ref(), &mixed[i]);
            let resid: Vec<f64> = proj.iter().zip(&x[i]).map(|(a, b)| a + b).collect();
            let hidden = linear(
                &b.fc1.weight,
                b.fc1.bias.as_ref(),
                &layer_norm(&b.norm2, &resid),
            );
            let act: Vec<f64> = hidden.iter().map(|&v| gelu_tanh(v)).collect();
            let mlp = linear(&b.fc2.weight, b.fc2.bias.as_ref(), &act);
            mlp.iter().zip(&resid).map(|(a, b)| a + b).collect()
        })
        .collect();
    (out, attn)
}

/// Minimal pooler: `softmax(q . K^T / sqrt(d_head)) V` per head, keys and
/// values without bias. Returns the pooled vector and `A[h][j]`.
pub fn pool_minimal(bundle: &ModelBundle<f64>, tokens: &Rows) -> (Vec<f64>, Rows) {
    let p = bundle.weights.pooler.as_ref().expect("pooler weights");
    assert!(p.is_minimal());
    let heads = bundle.config.pooler_heads();
    let d = tokens[0].len();
    let dh = d / heads;
    let keys: Rows = tokens
        .iter()
        .map(|r| linear(&p.key.weight, p.key.bias.as_ref(), r))
        .collect();
    let values: Rows = tokens
        .iter()
        .map(|r| linear(&p.value.weight, p.value.bias.as_ref(), r))
        .collect();
    let q = p.query.data();
    let mut pooled = vec![0.0; d];
    let mut maps = Vec::new();
    for h in 0..heads {
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| {
                (0..dh).map(|c| q[h * dh + c] * k[h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
            })
            .collect();
        let a = softmax(&logits);
        for (j, v) in values.iter().enumerate() {
            for c in 0..dh {
                pooled[h * dh + c] += a[j] * v[h * dh + c];
            }
        }
        maps.push(a);
    }
    (pooled, maps)
}

/// Embedding head: final norm, pooling, projection.
pub fn head(bundle: &ModelBundle<f64>, tokens: &Rows) -> Vec<f64> {
    let norm = |r: &Vec<f64>| match &bundle.weights.norm {
        Some(n) => layer_norm(n, r),
        None => r.clone(),
    };
    let pooled = match bundle.config.pooling {
        Pooling::ClsToken => norm(&tokens[0]),
        Pooling::AttnPooler => pool_minimal(bundle, &tokens.iter().map(norm).collect()).0,
    };
    match &bundle.weights.proj {
        Some(p) => {
            let cols = p.shape()[1];
            (0..cols)
                .map(|j| {
                    (0..pooled.len())
                        .map(|k| pooled[k] * p.data()[k * cols + j])
                        .sum()
                })
                .collect()
        }
        None => pooled,
    }
}

/// `Z^0 .. Z^L` and every attention map.
pub fn forward(bundle: &ModelBundle<f64>, image: &Tensor<f64>) -> (Vec<Rows>, Vec<Vec<Rows>>) {
    let mut zs = vec![embed(bundle, image)];
    let mut maps = Vec::new();
    for b in &bundle.weights.blocks {
        let (z, a) = block(b, bundle.config.heads, zs.last().unwrap());
        zs.push(z);
        maps.push(a);
    }
    (zs, maps)
}

pub fn score(column: &[f64], normalize: bool, embedding: &[f64]) -> f64 {
    let norm = if normalize {
        embedding.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        1.0
    };
    embedding
        .iter()
        .zip(column)
        .map(|(e, c)| e / norm * c)
        .sum()
}

pub fn flatten(rows: &Rows) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample(grid: &[f64], side: usize, size: usize) -> Vec<f64> {
    let coord = |i: usize| {
        let s = ((i as f64 + 0.5) * side as f64 / size as f64 - 0.5).clamp(0.0, (side - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(side - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for x in 0..size {
            let (x0, x1, fx) = coord(x);
            let top = grid[y0 * side + x0] * (1.0 - fx) + grid[y0 * side + x1] * fx;
            let bottom = grid[y1 * side + x0] * (1.0 - fx) + grid[y1 * side + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Relevance of one gradient `[h, rows, cols]`: ReLU, then the mean over
/// heads and rows, prefix columns dropped.
pub fn relevance(grad: &Tensor<f64>, prefix: usize) -> Vec<f64> {
    let (h, rows, cols) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    (prefix..cols)
        .map(|c| {
            let mut s = 0.0;
            for k in 0..h {
                for i in 0..rows {
                    s += grad.data()[(k * rows + i) * cols + c].max(0.0);
                }
            }
            s / (h * rows) as f64
        })
        .collect()
}

/// The whole explanation chain driven by finite-difference attention
/// gradients instead of the analytic backward.
pub fn fd_legrad(
    bundle: &ModelBundle<f64>,
    image: &Tensor<f64>,
    head: &legrad_core::model::ScoreHead<f64>,
    layers: &[usize],
) -> Vec<f64> {
    let z0 = bundle.embed(image).unwrap();
    let prefix = bundle.config.prefix_tokens();
    let mut mean: Vec<f64> = Vec::new();
    for &l in layers {
        let g = legrad_core::explain::fd_grad_attention(bundle, &z0, l, head, 1e-4).unwrap();
        let r = relevance(&g, prefix);
        if mean.is_empty() {
            mean = vec![0.0; r.len()];
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / layers.len() as f64;
        }
    }
    let side = (mean.len() as f64).sqrt().round() as usize;
    min_max(&upsample(&mean, side, bundle.config.image_size))
}

/// `A_tilde^L ... A_tilde^1` from explicit per-layer matrices.
pub fn rollout_oracle(maps: &[Tensor<f64>]) -> Rows {
    let t = maps[0].shape()[1];
    let mut acc: Rows = (0..t)
        .map(|i| (0..t).map(|j| (i == j) as u8 as f64).collect())
        .collect();
    for a in maps {
        let h = a.shape()[0];
        let mut m = vec![vec![0.0; t]; t];
        for i in 0..t {
            for j in 0..t {
                let mean: f64 =
                    (0..h).map(|k| a.data()[(k * t + i) * t + j]).sum::<f64>() / h as f64;
                m[i][j] = (mean + if i == j { 1.0 } else { 0.0 }) / 2.0;
            }
            let s: f64 = m[i].iter().sum();
            m[i].iter_mut().for_each(|v| *v /= s);
        }
        let mut next = vec![vec![0.0; t]; t];
        for i in 0..t {
            for j in 0..t {
                next[i][j] = (0..t).map(|k| m[i][k] * acc[k][j]).sum();
            }
        }
        acc = next;
    }
    acc
}
