//! Latency benchmark: time to first token and decoding throughput.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::flops::{flops_report, FlopsReport, Workload};
use crate::error::{Error, Result};
use crate::input::sequence::{assemble_prompt, encode_image};
use crate::input::tokenizer::BYTE_VOCAB;
use crate::input::{RawImage, TokenSequence};
use crate::model::{generate, GenerateOptions, Model};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchSpec {
    pub text_tokens: usize,
    pub max_new: usize,
    pub use_cache: bool,
    pub runs: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchSpec {
    /// One image, 256 text tokens, 120 generated tokens.
    pub fn standard(use_cache: bool) -> Self {
        BenchSpec {
            text_tokens: 256,
            max_new: 120,
            use_cache,
            runs: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub tile_size: usize,
    pub prompt_tokens: usize,
    pub image_tokens: usize,
    pub generated: usize,
    pub flops: FlopsReport,
    pub flops_total: u128,
    /// Median over runs.
    pub ttft_seconds: f64,
    /// Median over runs of `(tokens - 1) / (time after the first token)`.
    pub tps: f64,
    pub ttft_runs: Vec<f64>,
    pub tps_runs: Vec<f64>,
    pub ids: Vec<u32>,
}

/// A one-tile noise image followed by `text_tokens` random byte ids.
pub fn bench_prompt<F: Real>(model: &Model<F>, text_tokens: usize, seed: u64) -> Result<TokenSequence> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.tile_size;
    let mut px = vec![0u8; side * side * 3];
    rng.fill(px.as_mut_slice());
    let patches = encode_image(&RawImage::new(side, side, px)?, cfg)?;
    let text: Vec<u32> = (0..text_tokens).map(|_| rng.random_range(0..BYTE_VOCAB)).collect();
    Ok(assemble_prompt(Some(patches), &text))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Generates past eos so every run emits the same number of tokens.
pub fn bench_latency<F: Real>(model: &Model<F>, prompt: &TokenSequence, spec: BenchSpec) -> Result<BenchReport> {
    if spec.runs == 0 {
        return Err(Error::Usage("at least one timed run is required".into()));
    }
    let opts = GenerateOptions {
        max_new: spec.max_new,
        use_cache: spec.use_cache,
        ignore_eos: true,
        record_logits: false,
    };
    for _ in 0..spec.warmup {
        generate(model, prompt, opts)?;
    }
    let mut ttft = Vec::with_capacity(spec.runs);
    let mut tps = Vec::with_capacity(spec.runs);
    let mut ids: Option<Vec<u32>> = None;
    for _ in 0..spec.runs {
        let g = generate(model, prompt, opts)?;
        if g.ids.len() < 2 {
            return Err(Error::Benchmark(format!(
                "generated {} token(s); throughput needs at least 2",
                g.ids.len()
            )));
        }
        let first = g.token_times[0].as_secs_f64();
        let last = g.token_times[g.ids.len() - 1].as_secs_f64();
        ttft.push(first);
        tps.push((g.ids.len() - 1) as f64 / (last - first).max(f64::MIN_POSITIVE));
        match &ids {
            Some(prev) if prev != &g.ids => {
                return Err(Error::Benchmark("greedy output changed between runs".into()));
            }
            Some(_) => {}
            None => ids = Some(g.ids),
        }
    }
    let ids = ids.expect("at least one run");
    let cfg = model.config();
    let image_tokens = prompt.image.as_ref().map_or(0, |b| b.patches.tokens());
    let tiles = prompt.image.as_ref().map_or(0, |b| b.patches.tile_count);
    let flops = flops_report(
        cfg,
        Workload {
            tiles,
            text_tokens: prompt.len() - image_tokens,
            new_tokens: ids.len(),
        },
    );
    Ok(BenchReport {
        spec,
        tile_size: cfg.tile_size,
        prompt_tokens: prompt.len(),
        image_tokens,
        generated: ids.len(),
        flops_total: flops.total(),
        flops,
        ttft_seconds: median(&ttft),
        tps: median(&tps),
        ttft_runs: ttft,
        tps_runs: tps,
        ids,
    })
}
