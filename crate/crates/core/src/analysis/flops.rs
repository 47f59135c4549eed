//! Closed-form FLOP counts.
//!
//! One multiply-accumulate counts as 2 FLOPs, so a `[m, k] x [k, n]` product costs
//! `2·m·k·n`. Counted per layer over `t` tokens of width `c`, head count irrelevant:
//!
//! - q, k, v and output projections: `4 · 2·t·c·c`
//! - attention scores and weighted values over causal pairs `P = t(t+1)/2`: `2 · 2·P·c`
//! - feed-forward of width `f`: `3 · 2·t·c·f` (SwiGLU) or `2 · 2·t·c·f` (GELU)
//!
//! plus the patch projection `2·i·p·c` over `i` patch tokens of size `p`, the
//! pixel-shuffle projection `2·(i/4)·4c·c`, and the output head `2·t·c·v` over every
//! backbone position. Norms, softmax, rotary rotation and activations are not counted.
//! Generation with a cache processes one token per step through both stacks and the
//! head, attending to every earlier position.

use serde::Serialize;

use crate::config::{FfnKind, ModelConfig, SHUFFLE_FACTOR};

/// A forward workload: an optional image of `tiles` tiles (thumbnail included),
/// `text_tokens` further positions, and `new_tokens` generated with a cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Workload {
    pub tiles: usize,
    pub text_tokens: usize,
    pub new_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopsBreakdown {
    pub patch_embed: u128,
    pub shuffle: u128,
    pub embed_linear: u128,
    pub embed_attention: u128,
    pub llm_linear: u128,
    pub llm_attention: u128,
    pub head: u128,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u128 {
        self.patch_embed
            + self.shuffle
            + self.embed_linear
            + self.embed_attention
            + self.llm_linear
            + self.llm_attention
            + self.head
    }

    pub fn linear(&self) -> u128 {
        self.total() - self.embed_attention - self.llm_attention
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub workload: Workload,
    pub prefill: FlopsBreakdown,
    pub generation: FlopsBreakdown,
}

impl FlopsReport {
    pub fn total(&self) -> u128 {
        self.prefill.total() + self.generation.total()
    }
}

fn n(x: usize) -> u128 {
    x as u128
}

/// Per-token cost of one layer's projections and feed-forward.
fn layer_linear(cfg: &ModelConfig) -> u128 {
    let c = n(cfg.hidden);
    let f = n(cfg.ffn_hidden());
    let ffn_mats = match cfg.ffn {
        FfnKind::SwiGlu => 3,
        FfnKind::Gelu => 2,
    };
    2 * (4 * c * c + ffn_mats * c * f)
}

/// Score and value products for `pairs` causal query-key pairs in one layer.
fn layer_attention(cfg: &ModelConfig, pairs: u128) -> u128 {
    2 * 2 * pairs * n(cfg.hidden)
}

fn causal_pairs(t: usize) -> u128 {
    n(t) * (n(t) + 1) / 2
}

/// Cost of a full forward pass over the prompt, logits at every position.
pub fn prefill_flops(cfg: &ModelConfig, tiles: usize, text_tokens: usize) -> FlopsBreakdown {
    let c = n(cfg.hidden);
    let image = tiles * cfg.tokens_per_tile();
    let llm_image = tiles * cfg.llm_tokens_per_tile();
    let t_embed = image + text_tokens;
    let t_llm = llm_image + text_tokens;
    let r2 = n(SHUFFLE_FACTOR * SHUFFLE_FACTOR);
    FlopsBreakdown {
        patch_embed: 2 * n(image) * n(cfg.patch_dim()) * c,
        shuffle: if cfg.pixel_shuffle { 2 * n(llm_image) * r2 * c * c } else { 0 },
        embed_linear: n(cfg.embed_depth) * n(t_embed) * layer_linear(cfg),
        embed_attention: n(cfg.embed_depth) * layer_attention(cfg, causal_pairs(t_embed)),
        llm_linear: n(cfg.llm_depth) * n(t_llm) * layer_linear(cfg),
        llm_attention: n(cfg.llm_depth) * layer_attention(cfg, causal_pairs(t_llm)),
        head: 2 * n(t_llm) * c * n(cfg.vocab),
    }
}

/// Cost of `new_tokens` cached decoding steps after a prompt of the given shape.
pub fn generation_flops(cfg: &ModelConfig, tiles: usize, text_tokens: usize, new_tokens: usize) -> FlopsBreakdown {
    let c = n(cfg.hidden);
    let mut embed_ctx = tiles * cfg.tokens_per_tile() + text_tokens;
    let mut llm_ctx = tiles * cfg.llm_tokens_per_tile() + text_tokens;
    let mut out = FlopsBreakdown::default();
    for _ in 0..new_tokens {
        embed_ctx += 1;
        llm_ctx += 1;
        out.embed_linear += n(cfg.embed_depth) * layer_linear(cfg);
        out.embed_attention += n(cfg.embed_depth) * layer_attention(cfg, n(embed_ctx));
        out.llm_linear += n(cfg.llm_depth) * layer_linear(cfg);
        out.llm_attention += n(cfg.llm_depth) * layer_attention(cfg, n(llm_ctx));
        out.head += 2 * c * n(cfg.vocab);
    }
    out
}

pub fn flops_report(cfg: &ModelConfig, w: Workload) -> FlopsReport {
    FlopsReport {
        workload: w,
        prefill: prefill_flops(cfg, w.tiles, w.text_tokens),
        generation: generation_flops(cfg, w.tiles, w.text_tokens, w.new_tokens),
    }
}

/// Prefill FLOPs of a text-only sequence of `n` tokens.
pub fn flops_estimate(cfg: &ModelConfig, n: usize) -> u128 {
    prefill_flops(cfg, 0, n).total()
}
