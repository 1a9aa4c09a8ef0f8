use serde::{Deserialize, Serialize};

use super::Method;
use crate::error::{Error, Result};
use crate::imaging::{
    bilinear_resize, encode_png_gray, encode_png_rgb, min_max_normalize, overlay, Raster,
};

/// A relevance map over the preprocessed image.
///
/// `patch_grid` is the min-max normalized `grid x grid` map before
/// upsampling; `values` is the normalized bilinear upsampling of the raw
/// grid, row-major with `height` rows of `width` pixels. Both lie in
/// `[0, 1]` and are all zeros when their input is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HeatmapJson", into = "HeatmapJson")]
pub struct Heatmap {
    pub method: Method,
    pub layers: Vec<usize>,
    pub grid: usize,
    pub patch_grid: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Reshapes patch scores (prefix tokens already removed) to a square
    /// grid, upsamples to `size x size` and normalizes.
    pub fn from_patch_scores(
        method: Method,
        layers: Vec<usize>,
        scores: &[f64],
        size: usize,
    ) -> Result<Self> {
        let grid = (scores.len() as f64).sqrt().round() as usize;
        if grid == 0 || grid * grid != scores.len() {
            return Err(Error::Heatmap(format!(
                "{} patch scores do not form a square grid",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::Heatmap(format!("non-finite patch score {bad}")));
        }
        let values = min_max_normalize(&bilinear_resize(scores, grid, grid, size, size));
        Ok(Self {
            method,
            layers,
            grid,
            patch_grid: min_max_normalize(scores),
            width: size,
            height: size,
            values,
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png_gray(&self.values, self.width, self.height)
    }

    /// Jet-colored heatmap blended over the preprocessed image.
    pub fn overlay_png(&self, image: &Raster, alpha: f64) -> Result<Vec<u8>> {
        if image.width != self.width || image.height != self.height {
            return Err(Error::Heatmap(format!(
                "overlay base is {}x{}, heatmap is {}x{}",
                image.width, image.height, self.width, self.height
            )));
        }
        encode_png_rgb(&overlay(image, &self.values, alpha))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn rows(values: &[f64], width: usize) -> Vec<Vec<f64>> {
    values.chunks(width.max(1)).map(<[f64]>::to_vec).collect()
}

#[derive(Serialize, Deserialize)]
struct HeatmapJson {
    method: Method,
    layer_range: Vec<usize>,
    patch_grid: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "H")]
    height: usize,
    values: Vec<Vec<f64>>,
}

impl From<Heatmap> for HeatmapJson {
    fn from(h: Heatmap) -> Self {
        Self {
            method: h.method,
            layer_range: h.layers,
            patch_grid: rows(&h.patch_grid, h.grid),
            width: h.width,
            height: h.height,
            values: rows(&h.values, h.width),
        }
    }
}

impl TryFrom<HeatmapJson> for Heatmap {
    type Error = String;

    fn try_from(j: HeatmapJson) -> std::result::Result<Self, String> {
        let grid = j.patch_grid.len();
        let patch_grid: Vec<f64> = j.patch_grid.into_iter().flatten().collect();
        let values: Vec<f64> = j.values.into_iter().flatten().collect();
        if patch_grid.len() != grid * grid || values.len() != j.width * j.height {
            return Err("heatmap arrays do not match their declared sizes".into());
        }
        Ok(Self {
            method: j.method,
            layers: j.layer_range,
            grid,
            patch_grid,
            width: j.width,
            height: j.height,
            values,
        })
    }
}
