//! Architecture descriptions and named presets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tokenizer feeds the transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Regular non-overlapping patch grid.
    Holistic,
    /// Patches sampled at landmarks regressed by a CNN.
    Part,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    Trainable,
    Cosine,
    Coordinate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "fvit-b")]
    FvitB,
    #[serde(rename = "fvit-s")]
    FvitS,
    #[serde(rename = "fvit-tiny")]
    FvitTiny,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::FvitB => "fvit-b",
            Preset::FvitS => "fvit-s",
            Preset::FvitTiny => "fvit-tiny",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fvit-b" => Some(Preset::FvitB),
            "fvit-s" => Some(Preset::FvitS),
            "fvit-tiny" => Some(Preset::FvitTiny),
            _ => None,
        }
    }
}

/// Convolutional landmark regressor layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkNetConfig {
    /// Output channels of each stride-2 conv stage.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    /// Std of the regression head weights at initialization.
    pub head_init_std: f64,
}

impl Default for LandmarkNetConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64, 128], kernel_size: 3, stride: 2, head_init_std: 1e-3 }
    }
}

impl LandmarkNetConfig {
    /// Width of the pooled penultimate feature.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    /// R, the number of visual tokens.
    pub num_patches: usize,
    /// K, side of each square patch in pixels.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub variant: Variant,
    pub pos_encoding: PosEncoding,
    pub bottleneck_violation: bool,
    pub stochastic_depth_prob: f64,
    pub layer_norm_eps: f64,
    pub preset: Option<Preset>,
    pub landmark: LandmarkNetConfig,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::FvitB => Self {
                image_height: 112,
                image_width: 112,
                channels: 3,
                num_patches: 196,
                patch_size: 8,
                embed_dim: 768,
                mlp_dim: 2048,
                depth: 12,
                heads: 11,
                head_dim: 768 / 11,
                variant: Variant::Holistic,
                pos_encoding: PosEncoding::Trainable,
                bottleneck_violation: false,
                stochastic_depth_prob: 0.1,
                layer_norm_eps: 1e-6,
                preset: Some(preset),
                landmark: LandmarkNetConfig::default(),
            },
            Preset::FvitS => Self {
                embed_dim: 512,
                mlp_dim: 2560,
                head_dim: 512 / 11,
                preset: Some(preset),
                ..Self::preset(Preset::FvitB)
            },
            Preset::FvitTiny => Self {
                image_height: 56,
                image_width: 56,
                channels: 3,
                num_patches: 49,
                patch_size: 8,
                embed_dim: 64,
                mlp_dim: 128,
                depth: 4,
                heads: 4,
                head_dim: 16,
                variant: Variant::Part,
                pos_encoding: PosEncoding::Trainable,
                bottleneck_violation: false,
                stochastic_depth_prob: 0.1,
                layer_norm_eps: 1e-6,
                preset: Some(preset),
                landmark: LandmarkNetConfig::default(),
            },
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_pos_encoding(mut self, kind: PosEncoding) -> Self {
        self.pos_encoding = kind;
        self
    }

    /// Sets R and the matching tiling patch size `K = H / √R`.
    pub fn with_patches(mut self, num_patches: usize) -> Result<Self> {
        self.num_patches = num_patches;
        self.patch_size = self.grid_patch_size()?;
        Ok(self)
    }

    /// √R, when R is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let p = libm::round(libm::sqrt(self.num_patches as f64)) as usize;
        (p * p == self.num_patches && p > 0).then_some(p)
    }

    /// Patch size of the non-overlapping tiling, if the geometry admits one.
    pub fn grid_patch_size(&self) -> Result<usize> {
        let p = self
            .grid_side()
            .ok_or_else(|| Error::Config(format!("num_patches={} is not a perfect square", self.num_patches)))?;
        if self.image_height != self.image_width {
            return Err(Error::Config(format!(
                "square tiling needs a square image, got {}x{}",
                self.image_height, self.image_width
            )));
        }
        if !self.image_height.is_multiple_of(p) {
            return Err(Error::Config(format!("image side {} is not divisible by sqrt(R)={p}", self.image_height)));
        }
        Ok(self.image_height / p)
    }

    /// Checks the non-overlapping tiling invariant `K = H / √R`.
    pub fn check_tiling(&self) -> Result<()> {
        let k = self.grid_patch_size()?;
        if k != self.patch_size {
            return Err(Error::Config(format!(
                "holistic tiling needs patch_size={k} for R={} at {}x{}, got {}",
                self.num_patches, self.image_height, self.image_width, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("num_patches", self.num_patches),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("mlp_dim", self.mlp_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_prob) {
            return Err(Error::Config(format!(
                "stochastic_depth_prob must be in [0, 1), got {}",
                self.stochastic_depth_prob
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        match self.variant {
            Variant::Holistic => {
                self.check_tiling()?;
                if self.bottleneck_violation {
                    return Err(Error::Config("bottleneck_violation requires the part variant".into()));
                }
            }
            Variant::Part => {
                if self.landmark.channels.is_empty() || self.landmark.channels.contains(&0) {
                    return Err(Error::Config("landmark channels must be non-empty and positive".into()));
                }
                if self.landmark.kernel_size == 0 || self.landmark.stride == 0 {
                    return Err(Error::Config("landmark kernel_size and stride must be positive".into()));
                }
            }
        }
        if self.pos_encoding == PosEncoding::Coordinate && self.variant == Variant::Holistic {
            // coordinate encodings of the holistic model use the fixed grid centres
            self.check_tiling()?;
        }
        Ok(())
    }

    /// Tokens per sequence including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches + 1
    }

    /// Flattened length of one patch, `C·K·K`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}
