use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::PoolingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVitConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Square patch side `R` in pixels.
    pub patch_size: usize,
    pub channels_in: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub pooling: PoolingConfig,
}

impl Default for ToyVitConfig {
    fn default() -> Self {
        ToyVitConfig {
            image_size: 16,
            patch_size: 4,
            channels_in: 1,
            embed_dim: 32,
            heads: 4,
            blocks: 2,
            mlp_ratio: 2.0,
            classes: 3,
            pooling: PoolingConfig::ggem_uniform(4, 3.0),
        }
    }
}

impl ToyVitConfig {
    /// The smallest model the gradient checks run on: D=16, 2 heads,
    /// 2 blocks, a 4×4 patch grid.
    pub fn gradcheck() -> Self {
        ToyVitConfig {
            image_size: 16,
            patch_size: 4,
            channels_in: 1,
            embed_dim: 16,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2.0,
            classes: 3,
            pooling: PoolingConfig::ggem(vec![2.0, 3.0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels_in", self.channels_in),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(Error::invalid(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        self.pooling.validate(Some(self.embed_dim))?;
        if self.pooling.strategy == crate::pooling::PoolingStrategy::Ggem && self.pooling.groups != self.heads {
            log::debug!(
                "ggem groups ({}) differ from attention heads ({})",
                self.pooling.groups,
                self.heads
            );
        }
        Ok(())
    }

    /// `N`, patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patch tokens plus the class token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels_in
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}
