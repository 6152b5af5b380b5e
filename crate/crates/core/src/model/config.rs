use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and widths of the masked autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub n_ocean: usize,
    /// Feed-forward hidden width as a multiple of the block width.
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 11,
            embed_dim: 64,
            encoder_depth: 2,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 4,
            mask_ratio: 0.9,
            n_ocean: 3,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// ViT-Base backbone at 224 px with 16 px patches.
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 11,
            embed_dim: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mask_ratio: 0.9,
            n_ocean: 3,
            mlp_ratio: 4,
        }
    }

    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            encoder_depth: 1,
            encoder_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            mask_ratio: 0.9,
            n_ocean: 3,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("encoder_heads", self.encoder_heads),
            ("decoder_dim", self.decoder_dim),
            ("decoder_heads", self.decoder_heads),
            ("n_ocean", self.n_ocean),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!(
                    "image_size {} is not a multiple of patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio", "must lie in [0, 1)"));
        }
        if !self.embed_dim.is_multiple_of(self.encoder_heads) {
            return Err(Error::config(
                "encoder_heads",
                "embed_dim must be divisible by encoder_heads",
            ));
        }
        if !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::config(
                "decoder_heads",
                "decoder_dim must be divisible by decoder_heads",
            ));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Length of one flattened patch vector.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::vit_base().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn vit_base_geometry() {
        let cfg = ModelConfig::vit_base();
        assert_eq!(cfg.n_patches(), 196);
        assert_eq!(cfg.patch_dim(), 16 * 16 * 11);
    }

    #[test]
    fn rejects_bad_fields() {
        let bad = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("patch_size"));
        let bad = ModelConfig {
            mask_ratio: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("mask_ratio"));
        let bad = ModelConfig {
            encoder_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
