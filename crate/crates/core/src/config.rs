//! Architectural hyper-parameters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::input::tokenizer;
use crate::params::hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    SwiGlu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub embed_depth: usize,
    pub llm_depth: usize,
    pub vocab: usize,
    pub tile_size: usize,
    pub patch_stride: usize,
    pub max_tiles: usize,
    pub pixel_shuffle: bool,
    pub ffn_multiple: f64,
    pub rope_base: f64,
    pub max_seq_len: usize,
    pub norm: NormKind,
    pub ffn: FfnKind,
    pub rope: bool,
    pub norm_eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            embed_depth: 4,
            llm_depth: 4,
            vocab: tokenizer::VOCAB_SIZE,
            tile_size: 32,
            patch_stride: 8,
            max_tiles: 4,
            pixel_shuffle: false,
            ffn_multiple: 2.75,
            rope_base: 10000.0,
            max_seq_len: 512,
            norm: NormKind::Rms,
            ffn: FfnKind::SwiGlu,
            rope: true,
            norm_eps: 1e-6,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Published geometry: 448 tiles, stride 28, 2048 wide, 16 heads, 8 embedding
    /// layers on a 24-layer backbone with a 92,553-entry vocabulary.
    pub fn paper() -> Self {
        ModelConfig {
            hidden: 2048,
            heads: 16,
            embed_depth: 8,
            llm_depth: 24,
            vocab: 92_553,
            tile_size: 448,
            patch_stride: 28,
            max_tiles: 12,
            pixel_shuffle: false,
            ffn_multiple: 4.0,
            rope_base: 1_000_000.0,
            max_seq_len: 8192,
            ..Self::desk()
        }
    }

    /// High-resolution variant: stride 14 followed by a 2x2 pixel shuffle.
    pub fn paper_hd() -> Self {
        ModelConfig {
            patch_stride: 14,
            pixel_shuffle: true,
            ..Self::paper()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Feed-forward width, rounded up to a multiple of 8.
    pub fn ffn_hidden(&self) -> usize {
        let raw = (self.ffn_multiple * self.hidden as f64).ceil() as usize;
        raw.div_ceil(8) * 8
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_stride * self.patch_stride
    }

    /// Patch tokens per side of one tile.
    pub fn grid_side(&self) -> usize {
        self.tile_size / self.patch_stride
    }

    pub fn tokens_per_tile(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Tokens per tile as seen by the backbone (after pixel shuffle, when enabled).
    pub fn llm_tokens_per_tile(&self) -> usize {
        if self.pixel_shuffle {
            self.tokens_per_tile() / (SHUFFLE_FACTOR * SHUFFLE_FACTOR)
        } else {
            self.tokens_per_tile()
        }
    }

    /// Rows of the learnable position table: every tile plus the thumbnail.
    pub fn max_image_tokens(&self) -> usize {
        (self.max_tiles + 1) * self.tokens_per_tile()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.rope && self.head_dim() % 2 != 0 {
            return bad(format!("rotary encoding needs an even head dim, got {}", self.head_dim()));
        }
        if self.llm_depth < 1 {
            return bad("llm_depth must be at least 1".into());
        }
        if self.vocab < 2 {
            return bad(format!("vocab {} < 2", self.vocab));
        }
        if self.patch_stride == 0 || self.tile_size < self.patch_stride || self.tile_size % self.patch_stride != 0 {
            return bad(format!(
                "tile size {} not divisible by patch stride {}",
                self.tile_size, self.patch_stride
            ));
        }
        if self.pixel_shuffle && self.grid_side() % SHUFFLE_FACTOR != 0 {
            return bad(format!(
                "pixel shuffle needs a tile grid side divisible by {SHUFFLE_FACTOR}, got {}",
                self.grid_side()
            ));
        }
        if self.max_tiles == 0 {
            return bad("max_tiles must be at least 1".into());
        }
        if self.ffn_multiple <= 0.0 || self.norm_eps < 0.0 || self.init_std <= 0.0 {
            return bad("ffn_multiple, norm_eps and init_std must be positive".into());
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, compact.
    pub fn canonical_json(&self) -> String {
        canonical_json(self)
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Side of the token neighborhood merged by the HD pixel shuffle.
pub const SHUFFLE_FACTOR: usize = 2;

/// Serializes through `serde_json::Value`, whose maps are sorted by key.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config types always serialize");
    serde_json::to_string(&v).expect("value always serializes")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        ModelConfig::paper_hd().validate().unwrap();
    }

    #[test]
    fn token_counts() {
        let desk = ModelConfig::desk();
        assert_eq!(desk.tokens_per_tile(), 16);
        assert_eq!(ModelConfig::paper().tokens_per_tile(), 256);
        let hd = ModelConfig::paper_hd();
        assert_eq!(hd.tokens_per_tile(), 1024);
        assert_eq!(hd.llm_tokens_per_tile(), 256);
    }

    #[test]
    fn validation_errors() {
        let mut c = ModelConfig::desk();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.patch_stride = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.llm_depth = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.tile_size = 24;
        c.pixel_shuffle = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn canonical_json_is_sorted_and_stable() {
        let c = ModelConfig::desk();
        let j = c.canonical_json();
        let keys: Vec<&str> = j
            .trim_matches(|ch| ch == '{' || ch == '}')
            .split(',')
            .map(|kv| kv.split(':').next().unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let back: ModelConfig = serde_json::from_str(&j).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
