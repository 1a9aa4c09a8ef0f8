use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::GeluKind;

/// How the final token matrix becomes one image embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Processed class token `z^L_0`.
    ClsToken,
    /// Learned-query cross-attention over the tokens.
    AttnPooler,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::ClsToken => "cls_token",
            Pooling::AttnPooler => "attn_pooler",
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
    /// Whether a class token is prepended. Pooler-only models (SigLIP) have none.
    #[serde(default = "default_true")]
    pub class_token: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub gelu: GeluKind,
    /// Head count of the attentional pooler; defaults to `heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooler_heads: Option<usize>,
}

impl ViTConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `n`, the number of image patches.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Leading non-patch tokens (the class token, if any).
    pub fn prefix_tokens(&self) -> usize {
        usize::from(self.class_token)
    }

    /// Token count `n + 1` (or `n` without a class token).
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + self.prefix_tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn pooler_heads(&self) -> usize {
        self.pooler_heads.unwrap_or(self.heads)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.patch_size == 0 || self.image_size == 0 {
            return fail("width, heads, patch_size and image_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return fail(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.pooling == Pooling::AttnPooler && !self.width.is_multiple_of(self.pooler_heads()) {
            return fail(format!(
                "width {} not divisible by pooler heads {}",
                self.width,
                self.pooler_heads()
            ));
        }
        if self.pooling == Pooling::ClsToken && !self.class_token {
            return fail("cls_token pooling requires a class token".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} yields an empty MLP", self.mlp_ratio));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMethod {
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CropMethod {
    #[default]
    Center,
}

/// Image preprocessing constants, carried in the container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub resize: ResizeMethod,
    #[serde(default)]
    pub crop: CropMethod,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl PreprocessConfig {
    /// Raw `[0, 1]` pixels pass through unchanged.
    pub fn identity() -> Self {
        Self {
            resize: ResizeMethod::Bilinear,
            crop: CropMethod::Center,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// OpenAI CLIP / OpenCLIP normalization constants.
    pub fn clip() -> Self {
        Self {
            resize: ResizeMethod::Bilinear,
            crop: CropMethod::Center,
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}
