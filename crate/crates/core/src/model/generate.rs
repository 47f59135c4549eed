//! Greedy decoding with and without a key/value cache.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::input::tokenizer::EOS;
use crate::input::TokenSequence;
use crate::tensor::{Real, Tensor};

use super::forward::Session;
use super::Model;

/// Keys (after rotary encoding) and values of every position one layer has seen.
#[derive(Clone, Debug, Default)]
pub struct LayerKv<F> {
    k: Vec<F>,
    v: Vec<F>,
    rows: usize,
    width: usize,
}

impl<F: Real> LayerKv<F> {
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub(crate) fn tensors(&self) -> Option<(Tensor<F>, Tensor<F>)> {
        if self.rows == 0 {
            return None;
        }
        let shape = vec![self.rows, self.width];
        Some((
            Tensor::new(shape.clone(), self.k.clone()).expect("cache rows match data"),
            Tensor::new(shape, self.v.clone()).expect("cache rows match data"),
        ))
    }

    pub(crate) fn append(&mut self, k: &Tensor<F>, v: &Tensor<F>) {
        self.width = k.cols();
        self.rows += k.rows();
        self.k.extend_from_slice(k.data());
        self.v.extend_from_slice(v.data());
    }
}

/// Per-layer caches of both stacks; append-only.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    pub(crate) embed: Vec<LayerKv<F>>,
    pub(crate) llm: Vec<LayerKv<F>>,
}

impl<F: Real> KvCache<F> {
    pub fn new(model: &Model<F>) -> Self {
        let cfg = model.config();
        KvCache {
            embed: (0..cfg.embed_depth).map(|_| LayerKv::default()).collect(),
            llm: (0..cfg.llm_depth).map(|_| LayerKv::default()).collect(),
        }
    }

    /// Positions processed by the embedding stack.
    pub fn embed_len(&self) -> Option<usize> {
        self.embed.first().map(LayerKv::len)
    }

    /// Positions processed by the backbone.
    pub fn llm_len(&self) -> usize {
        self.llm.first().map_or(0, LayerKv::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub use_cache: bool,
    /// Keep decoding past eos (fixed-length benchmarking).
    pub ignore_eos: bool,
    pub record_logits: bool,
}

impl GenerateOptions {
    pub fn greedy(max_new: usize) -> Self {
        GenerateOptions {
            max_new,
            use_cache: true,
            ignore_eos: false,
            record_logits: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub ids: Vec<u32>,
    /// Final-position logits before each emission, when recorded.
    pub logits: Vec<Vec<f64>>,
    /// Elapsed time from the start of the prompt forward to each emission.
    pub token_times: Vec<Duration>,
}

fn argmax<F: Real>(row: &[F]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding; ties go to the lowest id. Stops at eos (unless ignored), after
/// `max_new` tokens, or when the sequence reaches the configured maximum length.
pub fn generate<F: Real>(model: &Model<F>, prompt: &TokenSequence, opts: GenerateOptions) -> Result<Generation> {
    if opts.max_new == 0 {
        return Err(Error::Usage("max_new must be at least 1".into()));
    }
    let max_len = model.config().max_seq_len;
    if prompt.len() > max_len {
        return Err(Error::Capacity {
            what: "prompt",
            len: prompt.len(),
            max: max_len,
        });
    }
    let start = Instant::now();
    let mut out = Generation {
        ids: Vec::new(),
        logits: Vec::new(),
        token_times: Vec::new(),
    };
    let emit = |out: &mut Generation, row: &[F]| -> bool {
        let id = argmax(row);
        if opts.record_logits {
            out.logits.push(row.iter().map(|x| x.to_f64_lossless()).collect());
        }
        out.ids.push(id);
        out.token_times.push(start.elapsed());
        let done = out.ids.len() >= opts.max_new || (id == EOS && !opts.ignore_eos);
        done || prompt.len() + out.ids.len() >= max_len
    };

    if opts.use_cache {
        let mut s = Session::inference(model);
        let mark = s.bind_all();
        let mut cache = KvCache::new(model);
        let x = s.holistic_embed_cached(prompt, Some(&mut cache.embed))?;
        let (x, _) = s.llm_input(x, prompt)?;
        let logits = s.llm_forward_cached(x, Some(&mut cache.llm))?;
        let t = s.graph.value(logits);
        let mut done = emit(&mut out, t.row(t.rows() - 1));
        while !done {
            s.rewind(mark);
            let last = *out.ids.last().expect("at least one emission");
            let x = s.embed_text(&[last])?;
            let x = s.run_stack(super::Stack::Embed, x, Some(&mut cache.embed))?;
            let logits = s.llm_forward_cached(x, Some(&mut cache.llm))?;
            done = emit(&mut out, s.graph.value(logits).row(0));
        }
    } else {
        let mut seq = prompt.clone();
        loop {
            let mut s = Session::inference(model);
            let f = s.forward(&seq)?;
            let t = s.graph.value(f.logits);
            let done = emit(&mut out, t.row(t.rows() - 1));
            if done {
                break;
            }
            seq.push_text(*out.ids.last().expect("at least one emission"));
        }
    }
    Ok(out)
}
