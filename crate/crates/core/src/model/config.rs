use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// All patch tokens of all frames in one encoder sequence.
    Full,
    /// Each frame encoded on its own; the decoder attends over all outputs.
    Fid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub patch_size: usize,
    /// Frames are square with this side.
    pub image_size: usize,
    pub max_frames: usize,
    /// Longest encoder text input.
    pub max_text_len: usize,
    /// Longest decoder sequence, BOS and EOS included.
    pub max_target_len: usize,
    pub variant: Variant,
    pub fid_temporal_embeddings: bool,
    pub tie_output_head: bool,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_mult: 4,
            vocab: 0,
            patch_size: 16,
            image_size: 32,
            max_frames: 8,
            max_text_len: 32,
            max_target_len: 32,
            variant: Variant::Full,
            fid_temporal_embeddings: true,
            tie_output_head: false,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_frames < 8 {
            return bad(format!("max_frames must be >= 8, got {}", self.max_frames));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.vocab < 6 {
            return bad(format!("vocab of {} cannot hold the special tokens", self.vocab));
        }
        if self.max_target_len < 2 || self.max_text_len == 0 || self.ffn_mult == 0 {
            return bad("max_target_len >= 2, max_text_len >= 1 and ffn_mult >= 1 are required".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * crate::media::CHANNELS
    }
}
