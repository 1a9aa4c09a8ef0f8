//! Linear and layer-norm primitives with their input-gradient rules.

use crate::tensor::{dot, row_moments, Result, Scalar, Tensor, TensorError};

/// `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.matmul_t(&self.weight)?;
        if let Some(b) = &self.bias {
            let (rows, _) = y.dims2()?;
            for r in 0..rows {
                for (v, &bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v = *v + bb;
                }
            }
        }
        Ok(y)
    }

    pub fn forward_vec(&self, x: &[T]) -> Vec<T> {
        let k = self.in_features();
        (0..self.out_features())
            .map(|o| {
                let v = dot(x, &self.weight.data()[o * k..(o + 1) * k]);
                match &self.bias {
                    Some(b) => v + b.data()[o],
                    None => v,
                }
            })
            .collect()
    }

    /// `dx = dy W`.
    pub fn backward(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        dy.matmul(&self.weight)
    }

    pub fn backward_vec(&self, dy: &[T]) -> Vec<T> {
        let k = self.in_features();
        let mut dx = vec![T::zero(); k];
        for (o, &g) in dy.iter().enumerate() {
            for (d, &w) in dx.iter_mut().zip(&self.weight.data()[o * k..(o + 1) * k]) {
                *d = *d + g * w;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }

    pub fn forward_vec(&self, x: &[T]) -> Vec<T> {
        let (mean, inv) = row_moments(x, self.eps);
        x.iter()
            .zip(self.gain.data().iter().zip(self.bias.data()))
            .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
            .collect()
    }

    /// Input gradient of one row given the pre-norm input `x`.
    pub fn backward_vec(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let (mean, inv) = row_moments(x, self.eps);
        let n = T::from_f64(x.len() as f64);
        let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv).collect();
        let g: Vec<T> = dy
            .iter()
            .zip(self.gain.data())
            .map(|(&d, &w)| d * w)
            .collect();
        let mean_g = g.iter().fold(T::zero(), |a, &b| a + b) / n;
        let mean_gx = dot(&g, &xhat) / n;
        g.iter()
            .zip(&xhat)
            .map(|(&gi, &xi)| inv * (gi - mean_g - xi * mean_gx))
            .collect()
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != dy.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_backward",
                left: x.shape().to_vec(),
                right: dy.shape().to_vec(),
            });
        }
        let (rows, _) = x.dims2()?;
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            out.extend(self.backward_vec(x.row(r), dy.row(r)));
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}
