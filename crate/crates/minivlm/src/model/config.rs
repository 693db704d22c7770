//! Model hyperparameters and the shape arithmetic derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the dual encoder.
///
/// The defaults describe the desk-scale model used throughout the test
/// suite: 64×64 RGB images cut into 8×8 patches (an 8×8 grid of 64 tokens),
/// a 64-wide transformer, and a 32-dimensional shared embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image side length in pixels; images are square RGB.
    pub image_size: usize,
    /// Patch side length in pixels; must divide `image_size`.
    pub patch_size: usize,
    /// Transformer width shared by both towers.
    pub embed_dim: usize,
    /// Transformer layers in the vision tower.
    pub depth_vision: usize,
    /// Transformer layers in the text tower.
    pub depth_text: usize,
    /// Attention heads; must divide `embed_dim`.
    pub heads: usize,
    /// Dimension of the shared image/text embedding space.
    pub proj_dim: usize,
    /// Token vocabulary size, including the reserved control tokens.
    pub vocab_size: usize,
    /// Maximum token sequence length, counting BOS and EOS.
    pub max_text_len: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth_vision: 4,
            depth_text: 2,
            heads: 4,
            proj_dim: 32,
            vocab_size: 512,
            max_text_len: 24,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Checks the structural invariants and returns the config on success.
    pub fn validate(self) -> Result<Self> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::Config(
                "image_size and patch_size must be positive".into(),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::Config("embed_dim and heads must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth_vision == 0 || self.depth_text == 0 {
            return Err(Error::Config("tower depths must be positive".into()));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        if self.vocab_size <= tokenizer_reserved() {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room after the {} reserved tokens",
                self.vocab_size,
                tokenizer_reserved()
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config(
                "max_text_len must be at least 2 (BOS plus EOS)".into(),
            ));
        }
        Ok(self)
    }

    /// Patch grid side length P = image_size / patch_size.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens N = P².
    pub fn patch_count(&self) -> usize {
        let p = self.grid_side();
        p * p
    }

    /// Flattened RGB patch length (3 · patch_size²), the vision tower's
    /// input width before patch embedding.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Per-head attention dimension.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Hidden width of the transformer MLP blocks (4× the model width).
    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Number of reserved control-token ids at the bottom of every vocabulary.
pub(crate) fn tokenizer_reserved() -> usize {
    crate::model::tokenizer::RESERVED_TOKENS
}
