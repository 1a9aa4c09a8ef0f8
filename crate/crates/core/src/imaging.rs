//! Plane resampling and PNG output.
//!
//! Bilinear resampling uses half-pixel centers with edge clamping (the
//! `align_corners = False` convention) and no antialiasing.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Bilinear resize of one row-major plane from `src_h x src_w` to `dst_h x dst_w`.
pub fn bilinear_resize(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let ys: Vec<(usize, usize, f64)> = (0..dst_h).map(|y| sample_coord(y, src_h, dst_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..dst_w).map(|x| sample_coord(x, src_w, dst_w)).collect();
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bottom = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Source neighbours and weight of the second one for output index `i`.
fn sample_coord(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
    (lo, hi, frac)
}

/// Min-max normalization to `[0, 1]`. A (near-)constant input, spread below
/// `1e-12`, maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = max - min;
    if !(span >= 1e-12) {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - min) / span).clamp(0.0, 1.0))
        .collect()
}

/// An RGB raster as three `[0, 1]` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Channel-major planes: `[c][y][x]`.
    pub planes: [Vec<f64>; 3],
}

impl Raster {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut planes = [
            Vec::with_capacity(w * h),
            Vec::with_capacity(w * h),
            Vec::with_capacity(w * h),
        ];
        for px in img.pixels() {
            for (c, plane) in planes.iter_mut().enumerate() {
                plane.push(px.0[c] as f64 / 255.0);
            }
        }
        Self {
            width: w,
            height: h,
            planes,
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Image("image has a zero-length side".into()));
        }
        Ok(Self::from_rgb(&img.to_rgb8()))
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            planes: rgb.map(|v| vec![v; width * height]),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            Rgb([0, 1, 2].map(|c| to_u8(self.planes[c][i])))
        })
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png_gray(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_u8(values[y as usize * width + x as usize])])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Piecewise-linear jet colormap.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Alpha-blends a jet-colored heatmap over an image of the same size.
pub fn overlay(base: &Raster, heat: &[f64], alpha: f64) -> RgbImage {
    RgbImage::from_fn(base.width as u32, base.height as u32, |x, y| {
        let i = y as usize * base.width + x as usize;
        let color = jet(heat[i]);
        Rgb([0, 1, 2].map(|c| to_u8((1.0 - alpha) * base.planes[c][i] + alpha * color[c])))
    })
}
