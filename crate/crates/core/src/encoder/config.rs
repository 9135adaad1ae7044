use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the transformer encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::deit_tiny()
    }
}

impl ViTConfig {
    /// DeiT-Ti: 192 wide, 3 heads of 64, 12 blocks, MLP ratio 4.
    pub const fn deit_tiny() -> Self {
        ViTConfig {
            dim: 192,
            heads: 3,
            depth: 12,
            mlp_ratio: 4,
        }
    }

    pub fn new(dim: usize, heads: usize, depth: usize, mlp_ratio: usize) -> Result<Self> {
        let cfg = ViTConfig {
            dim,
            heads,
            depth,
            mlp_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid(format!("model config must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}
