//! Forward passes recorded on a [`Graph`], with parameters bound lazily as leaves.

use std::ops::Range;

use crate::autograd::{Graph, Var};
use crate::config::{FfnKind, NormKind, SHUFFLE_FACTOR};
use crate::error::{Error, Result};
use crate::input::shuffle::shuffle_indices;
use crate::input::tiling::ImagePatches;
use crate::input::{Modality, TokenSequence};
use crate::params::{ParamGrads, ParamId};
use crate::tensor::{Real, Tensor};

use super::generate::LayerKv;
use super::{LayerIds, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Embed,
    Llm,
}

/// The backbone's view of a sequence; differs from the input sequence only when
/// pixel shuffle merges image tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LlmLayout {
    pub ids: Vec<u32>,
    pub modality: Vec<Modality>,
    pub loss_mask: Vec<bool>,
}

impl LlmLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Next-token targets: row `p - 1` predicts the id at every supervised row `p`.
    pub fn targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.len();
        let mut targets = vec![0usize; n];
        let mut mask = vec![false; n];
        for p in 1..n {
            if self.loss_mask[p] {
                targets[p - 1] = self.ids[p] as usize;
                mask[p - 1] = true;
            }
        }
        (targets, mask)
    }
}

pub struct Forward {
    /// Holistic embedding output, one row per input position.
    pub embedded: Var,
    pub llm_input: Var,
    pub logits: Var,
    pub layout: LlmLayout,
}

/// Post-softmax attention weights of one head.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub stack: Stack,
    pub layer: usize,
    pub head: usize,
    pub n: usize,
    /// Row-major `n × n`, query rows and key columns.
    pub weights: Vec<f64>,
    pub modality: Vec<Modality>,
}

impl AttentionRecord {
    pub fn at(&self, query: usize, key: usize) -> f64 {
        self.weights[query * self.n + key]
    }
}

/// One forward computation over a model. Trainable parameters enter as leaves that
/// require gradients; all others enter as constants.
pub struct Session<'m, F: Real> {
    pub graph: Graph<F>,
    model: &'m Model<F>,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
    capture: bool,
    captured: Vec<(Stack, usize, Var)>,
}

impl<'m, F: Real> Session<'m, F> {
    pub fn train(model: &'m Model<F>, trainable: &[ParamId]) -> Self {
        let mut flags = vec![false; model.params().len()];
        for id in trainable {
            flags[id.index()] = true;
        }
        Self::build(model, Graph::new(), flags)
    }

    pub fn inference(model: &'m Model<F>) -> Self {
        let n = model.params().len();
        Self::build(model, Graph::inference(), vec![false; n])
    }

    fn build(model: &'m Model<F>, graph: Graph<F>, trainable: Vec<bool>) -> Self {
        Session {
            graph,
            model,
            bound: vec![None; trainable.len()],
            trainable,
            capture: false,
            captured: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m Model<F> {
        self.model
    }

    /// Keep attention nodes so [`Session::attention_records`] can read them.
    pub fn set_capture(&mut self, on: bool) {
        self.capture = on;
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let t = self.model.params().get(id).clone();
        let v = self.graph.leaf(t, self.trainable[id.index()]);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Binds every parameter now and returns the graph length afterwards.
    pub fn bind_all(&mut self) -> usize {
        for id in self.model.all_ids() {
            self.param(id);
        }
        self.graph.len()
    }

    /// Forgets every node past `mark` (see [`Session::bind_all`]).
    pub fn rewind(&mut self, mark: usize) {
        self.graph.truncate(mark);
        for b in &mut self.bound {
            if b.is_some_and(|v| v.index() >= mark) {
                *b = None;
            }
        }
        self.captured.retain(|(_, _, v)| v.index() < mark);
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn gradients(&self, loss: Var) -> Result<ParamGrads<F>> {
        let mut g = self.graph.backward(loss)?;
        let mut out = ParamGrads::new(self.bound.len());
        for (i, b) in self.bound.iter().enumerate() {
            if let (Some(v), true) = (b, self.trainable[i]) {
                if let Some(t) = g.take(*v) {
                    out.set(ParamId(i), t);
                }
            }
        }
        Ok(out)
    }

    /// Text-embedding rows for `ids`.
    pub fn embed_text(&mut self, ids: &[u32]) -> Result<Var> {
        let vocab = self.model.config().vocab;
        let idx = ids
            .iter()
            .map(|&id| {
                if (id as usize) < vocab {
                    Ok(id as usize)
                } else {
                    Err(Error::Input(format!("token id {id} outside vocabulary {vocab}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let table = self.param(self.model.ids().text);
        self.graph.gather_rows(table, &idx)
    }

    /// Patch projection plus learnable position rows.
    pub fn embed_image(&mut self, patches: &ImagePatches) -> Result<Var> {
        let cfg = self.model.config();
        if patches.patch_dim() != cfg.patch_dim() {
            return Err(Error::Dimension(format!(
                "patch size {} does not match model patch size {}",
                patches.patch_dim(),
                cfg.patch_dim()
            )));
        }
        let n = patches.tokens();
        if n > cfg.max_image_tokens() {
            return Err(Error::Capacity {
                what: "image tokens",
                len: n,
                max: cfg.max_image_tokens(),
            });
        }
        let px = pixels_tensor::<F>(patches)?;
        let px = self.graph.constant(px);
        let ids = self.model.ids();
        let (w, b, pos) = (self.param(ids.patch_w), self.param(ids.patch_b), self.param(ids.pos));
        let x = self.graph.matmul(px, w)?;
        let x = self.graph.add_row(x, b)?;
        let rows: Vec<usize> = (0..n).collect();
        let pe = self.graph.gather_rows(pos, &rows)?;
        self.graph.add(x, pe)
    }

    /// Raw input embeddings of a sequence (before any layer).
    pub fn embed_inputs(&mut self, seq: &TokenSequence) -> Result<Var> {
        seq.validate()?;
        let Some(block) = &seq.image else {
            return self.embed_text(&seq.ids);
        };
        let range = block.range();
        let mut parts = Vec::with_capacity(3);
        if range.start > 0 {
            parts.push(self.embed_text(&seq.ids[..range.start])?);
        }
        parts.push(self.embed_image(&block.patches)?);
        if range.end < seq.len() {
            parts.push(self.embed_text(&seq.ids[range.end..])?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.graph.concat_rows(&parts)
    }

    fn check_capacity(&self, n: usize) -> Result<()> {
        let max = self.model.config().max_seq_len;
        if n > max {
            return Err(Error::Capacity {
                what: "sequence",
                len: n,
                max,
            });
        }
        Ok(())
    }

    /// Runs the causal layers of one stack. With a cache, rows continue after the
    /// cached positions and their keys/values are appended.
    pub fn run_stack(&mut self, stack: Stack, mut x: Var, mut cache: Option<&mut [LayerKv<F>]>) -> Result<Var> {
        let model = self.model;
        let layers = match stack {
            Stack::Embed => &model.ids().embed_layers,
            Stack::Llm => &model.ids().llm_layers,
        };
        for (i, l) in layers.iter().enumerate() {
            let kv = cache.as_deref_mut().map(|c| &mut c[i]);
            let (y, attn) = self.layer(l, x, kv)?;
            if self.capture {
                self.captured.push((stack, i, attn));
            }
            x = y;
        }
        Ok(x)
    }

    fn norm(&mut self, x: Var, gain: ParamId) -> Result<Var> {
        let cfg = self.model.config();
        let g = self.param(gain);
        let eps = F::lit(cfg.norm_eps);
        match cfg.norm {
            NormKind::Rms => self.graph.rms_norm(x, g, eps),
            NormKind::Layer => self.graph.layer_norm(x, g, eps),
        }
    }

    fn linear(&mut self, x: Var, w: ParamId) -> Result<Var> {
        let w = self.param(w);
        self.graph.matmul(x, w)
    }

    fn layer(&mut self, l: &LayerIds, x: Var, kv: Option<&mut LayerKv<F>>) -> Result<(Var, Var)> {
        let cfg = self.model.config();
        let heads = cfg.heads;
        let offset = kv.as_ref().map_or(0, |c| c.len());
        let h = self.norm(x, l.attn_norm)?;
        let mut q = self.linear(h, l.wq)?;
        let mut k = self.linear(h, l.wk)?;
        let v = self.linear(h, l.wv)?;
        if cfg.rope {
            q = self.graph.rope(q, heads, offset, cfg.rope_base)?;
            k = self.graph.rope(k, heads, offset, cfg.rope_base)?;
        }
        let (keys, values) = match kv {
            Some(c) => {
                let prev = c.tensors();
                c.append(self.graph.value(k), self.graph.value(v));
                match prev {
                    Some((pk, pv)) => {
                        let (pk, pv) = (self.graph.constant(pk), self.graph.constant(pv));
                        (self.graph.concat_rows(&[pk, k])?, self.graph.concat_rows(&[pv, v])?)
                    }
                    None => (k, v),
                }
            }
            None => (k, v),
        };
        let attn = self.graph.causal_attention(q, keys, values, heads, offset)?;
        let o = self.linear(attn, l.wo)?;
        let x = self.graph.add(x, o)?;
        let h = self.norm(x, l.ffn_norm)?;
        let f = match (cfg.ffn, l.w_gate) {
            (FfnKind::SwiGlu, Some(gate)) => {
                let g = self.linear(h, gate)?;
                let g = self.graph.silu(g)?;
                let u = self.linear(h, l.w_up)?;
                self.graph.mul(g, u)?
            }
            _ => {
                let u = self.linear(h, l.w_up)?;
                self.graph.gelu(u)?
            }
        };
        let f = self.linear(f, l.w_down)?;
        Ok((self.graph.add(x, f)?, attn))
    }

    /// Input embeddings followed by the causal embedding layers.
    pub fn holistic_embed(&mut self, seq: &TokenSequence) -> Result<Var> {
        self.holistic_embed_cached(seq, None)
    }

    pub(crate) fn holistic_embed_cached(&mut self, seq: &TokenSequence, cache: Option<&mut [LayerKv<F>]>) -> Result<Var> {
        self.check_capacity(seq.len())?;
        let x = self.embed_inputs(seq)?;
        self.run_stack(Stack::Embed, x, cache)
    }

    /// Maps embedding output to backbone input, merging image tokens when pixel
    /// shuffle is configured.
    pub fn llm_input(&mut self, embedded: Var, seq: &TokenSequence) -> Result<(Var, LlmLayout)> {
        let identity = LlmLayout {
            ids: seq.ids.clone(),
            modality: seq.modality.clone(),
            loss_mask: seq.loss_mask.clone(),
        };
        let (Some(wid), Some(block)) = (self.model.ids().shuffle, &seq.image) else {
            return Ok((embedded, identity));
        };
        let c = self.model.config().hidden;
        let r = SHUFFLE_FACTOR;
        let range = block.range();
        let p = &block.patches;
        let idx: Vec<usize> = shuffle_indices(p.tile_count, p.grid_side, r)?
            .into_iter()
            .map(|i| i + range.start)
            .collect();
        let merged = idx.len() / (r * r);
        let img = self.graph.gather_rows(embedded, &idx)?;
        let img = self.graph.reshape(img, &[merged, c * r * r])?;
        let w = self.param(wid);
        let img = self.graph.matmul(img, w)?;
        let mut parts = Vec::with_capacity(3);
        if range.start > 0 {
            let rows: Vec<usize> = (0..range.start).collect();
            parts.push(self.graph.gather_rows(embedded, &rows)?);
        }
        parts.push(img);
        if range.end < seq.len() {
            let rows: Vec<usize> = (range.end..seq.len()).collect();
            parts.push(self.graph.gather_rows(embedded, &rows)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            self.graph.concat_rows(&parts)?
        };
        let layout = LlmLayout {
            ids: merge_block(&seq.ids, &range, merged),
            modality: merge_block(&seq.modality, &range, merged),
            loss_mask: merge_block(&seq.loss_mask, &range, merged),
        };
        Ok((x, layout))
    }

    /// Backbone layers, final norm and vocabulary projection.
    pub fn llm_forward(&mut self, x: Var) -> Result<Var> {
        self.llm_forward_cached(x, None)
    }

    pub(crate) fn llm_forward_cached(&mut self, x: Var, cache: Option<&mut [LayerKv<F>]>) -> Result<Var> {
        let c = self.model.config().hidden;
        let width = self.graph.value(x).cols();
        if width != c {
            return Err(Error::Dimension(format!("backbone input width {width}, model width {c}")));
        }
        let h = self.run_stack(Stack::Llm, x, cache)?;
        let ids = self.model.ids();
        let (norm, head) = (ids.norm, ids.head);
        let h = self.norm(h, norm)?;
        self.linear(h, head)
    }

    pub fn forward(&mut self, seq: &TokenSequence) -> Result<Forward> {
        let embedded = self.holistic_embed(seq)?;
        let (llm_input, layout) = self.llm_input(embedded, seq)?;
        let logits = self.llm_forward(llm_input)?;
        Ok(Forward {
            embedded,
            llm_input,
            logits,
            layout,
        })
    }

    /// Mean next-token cross-entropy over the supervised positions.
    pub fn lm_loss(&mut self, seq: &TokenSequence) -> Result<Var> {
        let f = self.forward(seq)?;
        let (targets, mask) = f.layout.targets();
        self.graph.cross_entropy(f.logits, &targets, &mask)
    }

    /// Weights of every captured attention node in `stack` whose layer is listed.
    pub fn attention_records(&self, stack: Stack, layers: &[usize], modality: &[Modality]) -> Vec<AttentionRecord> {
        let mut out = Vec::new();
        for &(s, layer, v) in &self.captured {
            if s != stack || !layers.contains(&layer) {
                continue;
            }
            let Some(p) = self.graph.attention_probs(v) else {
                continue;
            };
            let offset = p.keys - p.queries;
            for head in 0..p.heads {
                let n = p.keys;
                let mut weights = vec![0.0; n * n];
                for i in 0..p.queries {
                    let src = &p.probs[(head * p.queries + i) * p.keys..][..p.keys];
                    let dst = &mut weights[(offset + i) * n..][..n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s.to_f64_lossless();
                    }
                }
                out.push(AttentionRecord {
                    stack,
                    layer,
                    head,
                    n,
                    weights,
                    modality: modality.to_vec(),
                });
            }
        }
        out
    }
}

fn merge_block<T: Copy>(v: &[T], range: &Range<usize>, merged: usize) -> Vec<T> {
    let mut out = v[..range.start].to_vec();
    out.extend(std::iter::repeat_n(v[range.start], merged));
    out.extend_from_slice(&v[range.end..]);
    out
}

pub(crate) fn pixels_tensor<F: Real>(p: &ImagePatches) -> Result<Tensor<F>> {
    let scale = 1.0 / 255.0;
    let data = p.pixels.iter().map(|&b| F::lit(b as f64 * scale)).collect();
    Tensor::new(vec![p.tokens(), p.patch_dim()], data)
}

/// Exact attention weights of the selected layers of one stack for a full sequence.
pub fn capture_attention<F: Real>(
    model: &Model<F>,
    seq: &TokenSequence,
    stack: Stack,
    layers: &[usize],
) -> Result<Vec<AttentionRecord>> {
    let depth = match stack {
        Stack::Embed => model.config().embed_depth,
        Stack::Llm => model.config().llm_depth,
    };
    if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
        return Err(Error::Usage(format!("layer {bad} out of range for a stack of depth {depth}")));
    }
    let mut s = Session::inference(model);
    s.set_capture(true);
    let f = s.forward(seq)?;
    let modality = match stack {
        Stack::Embed => seq.modality.clone(),
        Stack::Llm => f.layout.modality.clone(),
    };
    Ok(s.attention_records(stack, layers, &modality))
}
