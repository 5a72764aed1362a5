use serde::{Deserialize, Serialize};

use super::MaeError;

/// Hidden width of every transformer MLP relative to the block width.
pub const MLP_RATIO: usize = 4;

/// Architecture of the masked autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub loss_on_masked_only: bool,
    pub normalize_patch_targets: bool,
}

impl MaeConfig {
    /// Desk-scale default: 32px images, 4px patches, a 4x128 encoder and a
    /// 2x64 decoder.
    pub fn vip_micro() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            encoder_depth: 4,
            encoder_width: 128,
            encoder_heads: 4,
            decoder_depth: 2,
            decoder_width: 64,
            decoder_heads: 4,
            mask_ratio: 0.75,
            loss_on_masked_only: true,
            normalize_patch_targets: false,
        }
    }

    fn imagenet_scale(encoder_depth: usize, encoder_width: usize, encoder_heads: usize) -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            encoder_depth,
            encoder_width,
            encoder_heads,
            decoder_depth: 4,
            decoder_width: 512,
            decoder_heads: 16,
            mask_ratio: 0.75,
            loss_on_masked_only: true,
            normalize_patch_targets: false,
        }
    }

    pub fn vip_nano() -> Self {
        Self::imagenet_scale(12, 192, 3)
    }

    pub fn vip_tiny() -> Self {
        Self::imagenet_scale(12, 384, 6)
    }

    pub fn vip_small() -> Self {
        Self::imagenet_scale(12, 576, 9)
    }

    pub fn vip_base() -> Self {
        Self::imagenet_scale(12, 768, 12)
    }

    pub fn vip_large() -> Self {
        Self::imagenet_scale(24, 1024, 16)
    }

    pub const PRESETS: [&'static str; 6] = ["vip-micro", "vip-nano", "vip-tiny", "vip-small", "vip-base", "vip-large"];

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "vip-micro" => Self::vip_micro(),
            "vip-nano" => Self::vip_nano(),
            "vip-tiny" => Self::vip_tiny(),
            "vip-small" => Self::vip_small(),
            "vip-base" => Self::vip_base(),
            "vip-large" => Self::vip_large(),
            _ => return None,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Dimension of the pooled representation.
    pub fn latent_dim(&self) -> usize {
        self.encoder_width
    }

    pub fn num_masked(&self) -> usize {
        masked_count(self.num_patches(), self.mask_ratio)
    }

    pub fn validate(&self) -> Result<(), MaeError> {
        let err = |m: String| Err(MaeError::Config(m));
        for (name, v) in [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("encoder_depth", self.encoder_depth),
            ("encoder_width", self.encoder_width),
            ("encoder_heads", self.encoder_heads),
            ("decoder_width", self.decoder_width),
            ("decoder_heads", self.decoder_heads),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.encoder_width % self.encoder_heads != 0 {
            return err(format!(
                "encoder_width {} is not divisible by encoder_heads {}",
                self.encoder_width, self.encoder_heads
            ));
        }
        if self.decoder_width % self.decoder_heads != 0 {
            return err(format!(
                "decoder_width {} is not divisible by decoder_heads {}",
                self.decoder_width, self.decoder_heads
            ));
        }
        if self.encoder_width % 4 != 0 || self.decoder_width % 4 != 0 {
            return err("widths must be multiples of 4 for 2-D sinusoidal position embeddings".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return err(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if self.num_masked() >= self.num_patches() {
            return err(format!(
                "mask_ratio {} leaves no visible patch out of {}",
                self.mask_ratio,
                self.num_patches()
            ));
        }
        Ok(())
    }
}

/// `round(ratio * patches)`.
pub fn masked_count(patches: usize, ratio: f64) -> usize {
    (ratio * patches as f64).round() as usize
}
