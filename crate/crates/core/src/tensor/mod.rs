//! Dense row-major tensors and the deterministic kernels the model is built from.
//!
//! Every reduction runs in a fixed order (ascending index along the reduced
//! axis), so a kernel applied to identical inputs produces bit-identical
//! output regardless of how many rayon workers are available. Parallelism is
//! only ever applied across independent output rows.

mod container;
mod scalar;

pub use container::{
    AnyTensor, ContainerError, DType, TensorContainer, ALIGNMENT, FORMAT_VERSION, MAGIC,
};
pub use scalar::Scalar;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Work threshold (multiply-adds) above which matmul splits rows across threads.
const PARALLEL_MATMUL_WORK: usize = 1 << 16;
/// Depth of one k-tile in matmul.
const K_TILE: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: slice {start}..{end} out of bounds for extent {extent}")]
    SliceBounds {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// GELU flavour. Checkpoints exported from OpenCLIP use the exact erf form;
/// the tanh approximation is the engine default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluKind {
    #[default]
    Tanh,
    Erf,
}

/// sqrt(2/pi), the tanh-approximation scale.
const GELU_TANH_SCALE: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation.
const GELU_TANH_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, (0..len).map(&mut f).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        Self::from_fn(shape, |_| value)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(
            [n, n],
            |i| if i / n == i % n { T::one() } else { T::zero() },
        )
    }

    /// Rank-1 tensor over an owned vector.
    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new([data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op: "dims2",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let out = Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn relu(&self) -> Self {
        self.map(relu)
    }

    pub fn gelu(&self, kind: GeluKind) -> Self {
        self.map(|v| gelu(v, kind))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Self::new([c, r], data)
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank,
            });
        }
        let extent = self.shape[axis];
        if start >= end || end > extent {
            return Err(TensorError::SliceBounds {
                op: "slice",
                start,
                end,
                extent,
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Self::new(shape, data)
    }

    /// Mean over the listed axes; the reduced axes are removed from the shape.
    /// Reducing every axis yields a rank-1 tensor of length one.
    pub fn mean_over_axes(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
            return Err(TensorError::AxisOutOfRange {
                op: "mean_over_axes",
                axis,
                rank,
            });
        }
        let keep: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&a| self.shape[a]).collect()
        };
        let count: usize = axes
            .iter()
            .map(|&a| self.shape[a])
            .product::<usize>()
            .max(1);
        let strides = strides(&self.shape);
        let mut acc = vec![T::zero(); out_shape.iter().product()];
        let mut index = vec![0usize; rank];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            for (a, &s) in strides.iter().enumerate() {
                index[a] = rem / s;
                rem %= s;
            }
            let mut out = 0;
            for &a in &keep {
                out = out * self.shape[a] + index[a];
            }
            acc[out] = acc[out] + v;
        }
        let denom = T::from_f64(count as f64);
        Self::new(out_shape, acc.into_iter().map(|v| v / denom).collect())
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank,
            });
        }
        let n = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = self.data.clone();
        let mut lane = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (k, slot) in lane.iter_mut().enumerate() {
                    *slot = self.data[base + k * inner];
                }
                softmax_in_place(&mut lane);
                for (k, &v) in lane.iter().enumerate() {
                    data[base + k * inner] = v;
                }
            }
        }
        Self::new(self.shape.clone(), data)
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: f64) -> Result<Self> {
        let d = *self.shape.last().expect("tensor rank >= 1");
        if gain.shape != [d] || bias.shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let (mean, inv_std) = row_moments(row, eps);
            for ((v, &g), &b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
                *v = (*v - mean) * inv_std * g + b;
            }
        }
        let out = Self::new(self.shape.clone(), out)?;
        out.check_finite("layer_norm")?;
        Ok(out)
    }

    /// `self[m,k] x rhs[k,p]`. Each output element accumulates over `k` in
    /// ascending order, split into fixed tiles of depth [`K_TILE`].
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, p) = rhs.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        let kernel = |(i, out_row): (usize, &mut [T])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for k0 in (0..k).step_by(K_TILE) {
                for kk in k0..(k0 + K_TILE).min(k) {
                    let a = a_row[kk];
                    let b_row = &rhs.data[kk * p..(kk + 1) * p];
                    for (o, &b) in out_row.iter_mut().zip(b_row) {
                        *o = *o + a * b;
                    }
                }
            }
        };
        if m * k * p >= PARALLEL_MATMUL_WORK {
            out.par_chunks_mut(p).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(p).enumerate().for_each(kernel);
        }
        let out = Self::new([m, p], out)?;
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// `self[m,k] x rhs[p,k]^T`, the layout of a linear layer weight `[out, in]`.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (p, k2) = rhs.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        let kernel = |(i, out_row): (usize, &mut [T])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, &rhs.data[j * k..(j + 1) * k]);
            }
        };
        if m * k * p >= PARALLEL_MATMUL_WORK {
            out.par_chunks_mut(p).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(p).enumerate().for_each(kernel);
        }
        let out = Self::new([m, p], out)?;
        out.check_finite("matmul_t")?;
        Ok(out)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Sequential dot product (ascending index).
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn gelu<T: Scalar>(x: T, kind: GeluKind) -> T {
    let v = x.as_f64();
    let y = match kind {
        GeluKind::Tanh => {
            0.5 * v * (1.0 + (GELU_TANH_SCALE * (v + GELU_TANH_CUBIC * v * v * v)).tanh())
        }
        GeluKind::Erf => 0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)),
    };
    T::from_f64(y)
}

/// d gelu / dx.
pub fn gelu_grad<T: Scalar>(x: T, kind: GeluKind) -> T {
    let v = x.as_f64();
    let g = match kind {
        GeluKind::Tanh => {
            let inner = GELU_TANH_SCALE * (v + GELU_TANH_CUBIC * v * v * v);
            let t = inner.tanh();
            let d_inner = GELU_TANH_SCALE * (1.0 + 3.0 * GELU_TANH_CUBIC * v * v);
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner
        }
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
            let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + v * pdf
        }
    };
    T::from_f64(g)
}

/// Softmax of one lane, with max-subtraction.
pub fn softmax_in_place<T: Scalar>(lane: &mut [T]) {
    let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in lane.iter_mut() {
        *v = *v / sum;
    }
}

/// `(mean, 1/sqrt(var + eps))` of a row, two passes.
pub fn row_moments<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) / n;
    let var = row
        .iter()
        .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
        / n;
    (mean, T::one() / (var + T::from_f64(eps)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(r: usize, c: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new([r, c], v.to_vec()).unwrap()
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn identity_times_m_is_m() {
        let mut s = 3;
        let m = Tensor::<f64>::from_fn([3, 3], |_| lcg(&mut s)).unwrap();
        assert_eq!(Tensor::eye(3).unwrap().matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[0.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut s = 11;
        let a = Tensor::<f64>::from_fn([64, 64], |_| lcg(&mut s)).unwrap();
        let b = Tensor::<f64>::from_fn([64, 64], |_| lcg(&mut s)).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let mut acc = 0.0;
                for k in 0..64 {
                    acc += a.data()[i * 64 + k] * b.data()[k * 64 + j];
                }
                let got = c.data()[i * 64 + j];
                assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0));
            }
        }
        let at = a.matmul_t(&b.transpose().unwrap()).unwrap();
        for (x, y) in at.data().iter().zip(c.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t2(2, 3, &[0.0; 6]);
        assert!(matches!(
            a.matmul(&a),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_rows_are_bit_identical_parallel_or_not() {
        // 128x128x128 crosses the parallel threshold; a single-row product does not.
        let mut s = 5;
        let a = Tensor::<f32>::from_fn([128, 128], |_| lcg(&mut s) as f32).unwrap();
        let b = Tensor::<f32>::from_fn([128, 128], |_| lcg(&mut s) as f32).unwrap();
        let full = a.matmul(&b).unwrap();
        for i in [0, 17, 127] {
            let row = a.slice(0, i, i + 1).unwrap().matmul(&b).unwrap();
            assert_eq!(row.data(), full.row(i));
        }
        assert_eq!(full, a.matmul(&b).unwrap());
    }

    #[test]
    fn identity_associativity_is_bitwise() {
        let mut s = 9;
        let a = Tensor::<f32>::from_fn([5, 7], |_| lcg(&mut s) as f32).unwrap();
        let b = Tensor::<f32>::from_fn([7, 4], |_| lcg(&mut s) as f32).unwrap();
        let ai = a.matmul(&Tensor::eye(7).unwrap()).unwrap();
        assert_eq!(ai.matmul(&b).unwrap(), a.matmul(&b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(x.softmax(0).unwrap().data(), &[0.5, 0.5]);
        let y = Tensor::<f64>::vector(vec![1000.0, 0.0])
            .unwrap()
            .softmax(0)
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1].abs() < 1e-12);
        let z = Tensor::<f64>::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()])
            .unwrap()
            .softmax(0)
            .unwrap();
        for (got, want) in z.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t2(2, 2, &[0.0, 5.0, 0.0, -5.0]);
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::ones([4]).unwrap();
        let zeros = Tensor::<f64>::zeros([4]).unwrap();
        let c = Tensor::full([1, 4], 3.5).unwrap();
        assert!(c
            .layer_norm(&ones, &zeros, 1e-5)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let g = Tensor::<f64>::ones([2]).unwrap();
        let b = Tensor::<f64>::zeros([2]).unwrap();
        let y = t2(1, 2, &[1.0, -1.0]).layer_norm(&g, &b, 1e-5).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut s = 21;
        let d = 37;
        let x = Tensor::<f64>::from_fn([3, d], |_| 4.0 * lcg(&mut s) + 1.0).unwrap();
        let g = Tensor::<f64>::from_fn([d], |_| lcg(&mut s)).unwrap();
        let b = Tensor::<f64>::from_fn([d], |_| lcg(&mut s)).unwrap();
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for k in 0..d {
                let want = (row[k] - mean) / (var + 1e-5).sqrt() * g.data()[k] + b.data()[k];
                assert!((y.row(r)[k] - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let x = Tensor::<f64>::vector(vec![1.0, -2.0, 0.0]).unwrap();
        assert_eq!(x.relu().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(gelu(0.0f64, GeluKind::Tanh), 0.0);
        assert_eq!(gelu(0.0f64, GeluKind::Erf), 0.0);
        let m = Tensor::<f64>::ones([2, 3])
            .unwrap()
            .mean_over_axes(&[0, 1])
            .unwrap();
        assert_eq!(m.data(), &[1.0]);
        assert!(x.add(&Tensor::zeros([2]).unwrap()).is_err());
    }

    #[test]
    fn gelu_gradient_matches_central_difference() {
        for kind in [GeluKind::Tanh, GeluKind::Erf] {
            for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.2] {
                let h = 1e-6;
                let fd = (gelu(x + h, kind) - gelu(x - h, kind)) / (2.0 * h);
                assert!((gelu_grad(x, kind) - fd).abs() < 1e-8, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn mean_over_single_axis_and_slice() {
        let x = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.mean_over_axes(&[0]).unwrap().data(), &[2.5, 3.5, 4.5]);
        assert_eq!(x.mean_over_axes(&[1]).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(x.slice(1, 1, 3).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
        assert!(x.slice(1, 2, 4).is_err());
        assert_eq!(
            x.transpose().unwrap().data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::<f32>::vector(vec![f32::MAX]).unwrap();
        assert!(matches!(x.add(&x), Err(TensorError::NonFinite { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let y = Tensor::vector(v).unwrap().softmax(0).unwrap();
            let sum: f64 = y.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn kernels_are_deterministic(v in prop::collection::vec(-10f32..10.0, 12)) {
            let a = Tensor::new([3, 4], v.clone()).unwrap();
            let b = Tensor::new([4, 3], v).unwrap();
            prop_assert_eq!(a.matmul(&b).unwrap(), a.matmul(&b).unwrap());
            prop_assert_eq!(a.softmax(1).unwrap(), a.softmax(1).unwrap());
        }
    }
}
