use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of the mini vision transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 32×32 RGB inputs, 4×4 patches, 4 pre-norm blocks of width 64 with
    /// 8 heads and 128 MLP units each.
    pub const fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 8,
            mlp_hidden: 128,
            num_classes: 10,
        }
    }

    /// A reduced model that trains in seconds on one core: 8×8 inputs,
    /// five tokens, width 32. Same head/unit granularity as [`Self::toy`]
    /// relative to the prunable pool.
    pub const fn desk() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 8,
            mlp_hidden: 64,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("model config field {name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Contract(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Contract(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Parameters removed together with one attention head: its query, key
    /// and value slices plus its rows of the output projection.
    pub fn params_per_head(&self) -> usize {
        4 * self.embed_dim * self.head_dim()
    }

    /// Parameters removed together with one MLP unit: its fan-in column of
    /// the first affine map and fan-out row of the second.
    pub fn params_per_unit(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn total_prunable(&self) -> usize {
        self.num_layers
            * (self.num_heads * self.params_per_head() + self.mlp_hidden * self.params_per_unit())
    }

    pub fn num_units(&self) -> usize {
        self.num_layers * (self.num_heads + self.mlp_hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_shapes() {
        let mut c = ModelConfig::toy();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.num_heads = 7;
        assert!(c.validate().is_err());
        assert!(ModelConfig::toy().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
    }

    #[test]
    fn unit_sizes_from_shapes() {
        let c = ModelConfig {
            embed_dim: 16,
            num_heads: 4,
            mlp_hidden: 32,
            num_layers: 1,
            ..ModelConfig::toy()
        };
        assert_eq!(c.params_per_head(), 3 * (16 * 4) + 4 * 16);
        assert_eq!(c.params_per_head(), 256);
        assert_eq!(c.params_per_unit(), 32);
    }
}
