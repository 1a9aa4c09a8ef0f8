//! Resize-shorter-side, center-crop, normalize.

use super::config::PreprocessConfig;
use crate::error::Result;
use crate::imaging::{bilinear_resize, Raster};
use crate::tensor::{Scalar, Tensor};

/// How an original image maps onto the square model input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropGeometry {
    pub src_width: usize,
    pub src_height: usize,
    pub resized_width: usize,
    pub resized_height: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub size: usize,
}

impl CropGeometry {
    pub fn new(src_width: usize, src_height: usize, size: usize) -> Self {
        let short = src_width.min(src_height) as f64;
        let scale = size as f64 / short;
        let resized = |v: usize| ((v as f64 * scale).round() as usize).max(size);
        let (resized_width, resized_height) = (resized(src_width), resized(src_height));
        Self {
            src_width,
            src_height,
            resized_width,
            resized_height,
            offset_x: (resized_width - size) / 2,
            offset_y: (resized_height - size) / 2,
            size,
        }
    }

    /// Maps an original pixel coordinate into the model input grid; `None`
    /// when the point falls outside the crop.
    pub fn map_point(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let sx = self.resized_width as f64 / self.src_width as f64;
        let sy = self.resized_height as f64 / self.src_height as f64;
        let cx = ((x + 0.5) * sx - 0.5).round() - self.offset_x as f64;
        let cy = ((y + 0.5) * sy - 0.5).round() - self.offset_y as f64;
        let max = self.size as f64;
        (cx >= 0.0 && cy >= 0.0 && cx < max && cy < max).then_some((cx as usize, cy as usize))
    }

    /// Nearest-neighbour resample of a label mask into the model input grid.
    pub fn resize_mask_nearest(&self, mask: &[u8]) -> Vec<u8> {
        let sx = self.src_width as f64 / self.resized_width as f64;
        let sy = self.src_height as f64 / self.resized_height as f64;
        let mut out = Vec::with_capacity(self.size * self.size);
        for y in 0..self.size {
            let src_y = (((y + self.offset_y) as f64 + 0.5) * sy).floor() as usize;
            let src_y = src_y.min(self.src_height - 1);
            for x in 0..self.size {
                let src_x = (((x + self.offset_x) as f64 + 0.5) * sx).floor() as usize;
                out.push(mask[src_y * self.src_width + src_x.min(self.src_width - 1)]);
            }
        }
        out
    }

    /// Bilinear resize then crop of each plane: the RGB part of preprocessing.
    pub fn apply(&self, raster: &Raster) -> Raster {
        let planes = raster.planes.clone().map(|plane| {
            let resized = bilinear_resize(
                &plane,
                raster.height,
                raster.width,
                self.resized_height,
                self.resized_width,
            );
            let mut out = Vec::with_capacity(self.size * self.size);
            for y in 0..self.size {
                let row = (y + self.offset_y) * self.resized_width + self.offset_x;
                out.extend_from_slice(&resized[row..row + self.size]);
            }
            out
        });
        Raster {
            width: self.size,
            height: self.size,
            planes,
        }
    }
}

/// Resized and cropped raster plus the normalized `[3, S, S]` model input.
#[derive(Debug, Clone)]
pub struct Preprocessed<T> {
    pub geometry: CropGeometry,
    pub cropped: Raster,
    pub tensor: Tensor<T>,
}

pub fn preprocess<T: Scalar>(
    raster: &Raster,
    cfg: &PreprocessConfig,
    size: usize,
) -> Result<Preprocessed<T>> {
    let geometry = CropGeometry::new(raster.width, raster.height, size);
    let cropped = geometry.apply(raster);
    let tensor = normalize(&cropped, cfg)?;
    Ok(Preprocessed {
        geometry,
        cropped,
        tensor,
    })
}

/// Channel-wise `(x - mean) / std` of an already square raster.
pub fn normalize<T: Scalar>(raster: &Raster, cfg: &PreprocessConfig) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(3 * raster.width * raster.height);
    for c in 0..3 {
        data.extend(
            raster.planes[c]
                .iter()
                .map(|&v| T::from_f64((v - cfg.mean[c]) / cfg.std[c])),
        );
    }
    Ok(Tensor::new([3, raster.height, raster.width], data)?)
}
