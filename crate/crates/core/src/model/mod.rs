//! The monolithic model: patch/text embedders, a causal embedding stack and a causal
//! language-model stack built from one layer definition.

mod forward;
mod generate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::{FfnKind, ModelConfig, SHUFFLE_FACTOR};
use crate::error::{Error, CheckpointError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub(crate) use forward::pixels_tensor;
pub use forward::{capture_attention, AttentionRecord, Forward, LlmLayout, Session, Stack};
pub use generate::{generate, GenerateOptions, Generation, KvCache, LayerKv};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    pub(crate) name: String,
    pub(crate) shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: Option<ParamId>,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelIds {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub text: ParamId,
    pub shuffle: Option<ParamId>,
    pub embed_layers: Vec<LayerIds>,
    pub llm_layers: Vec<LayerIds>,
    pub norm: ParamId,
    pub head: ParamId,
}

fn layer_specs(cfg: &ModelConfig, prefix: &str, depth: usize) -> Vec<ParamSpec> {
    let c = cfg.hidden;
    let f = cfg.ffn_hidden();
    let std = cfg.init_std;
    let out_std = std / (2.0 * depth.max(1) as f64).sqrt();
    let mut v = Vec::new();
    for i in 0..depth {
        let p = |n: &str| format!("{prefix}.layers.{i}.{n}");
        let mut push = |n: &str, shape: Vec<usize>, init| v.push(ParamSpec { name: p(n), shape, init });
        push("attn_norm", vec![c], Init::Ones);
        push("wq", vec![c, c], Init::Normal(std));
        push("wk", vec![c, c], Init::Normal(std));
        push("wv", vec![c, c], Init::Normal(std));
        push("wo", vec![c, c], Init::Normal(out_std));
        push("ffn_norm", vec![c], Init::Ones);
        if cfg.ffn == FfnKind::SwiGlu {
            push("w_gate", vec![c, f], Init::Normal(std));
        }
        push("w_up", vec![c, f], Init::Normal(std));
        push("w_down", vec![f, c], Init::Normal(out_std));
    }
    v
}

pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.hidden;
    let std = cfg.init_std;
    let spec = |name: &str, shape: Vec<usize>, init| ParamSpec {
        name: name.to_string(),
        shape,
        init,
    };
    let mut v = vec![
        spec("embed.patch.weight", vec![cfg.patch_dim(), c], Init::Normal(std)),
        spec("embed.patch.bias", vec![c], Init::Zeros),
        spec("embed.pos", vec![cfg.max_image_tokens(), c], Init::Normal(std)),
        spec("embed.text", vec![cfg.vocab, c], Init::Normal(std)),
    ];
    if cfg.pixel_shuffle {
        let r2 = SHUFFLE_FACTOR * SHUFFLE_FACTOR;
        v.push(spec("embed.shuffle.weight", vec![r2 * c, c], Init::Normal(std)));
    }
    v.extend(layer_specs(cfg, "embed", cfg.embed_depth));
    v.extend(layer_specs(cfg, "llm", cfg.llm_depth));
    v.push(spec("llm.norm", vec![c], Init::Ones));
    v.push(spec("llm.head", vec![c, cfg.vocab], Init::Normal(std)));
    v
}

/// Per-tensor RNG stream so a tensor's initial value depends only on the seed and its
/// name (LLM weights are identical across embedding-depth variants).
pub(crate) fn name_seed(seed: u64, name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    seed ^ u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub(crate) fn normal_tensor<F: Real>(shape: &[usize], std: f64, seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(dist.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches shape")
}

/// Learnable parameters per layer (identical for both stacks).
pub fn layer_param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.hidden;
    let f = cfg.ffn_hidden();
    let ffn_mats = match cfg.ffn {
        FfnKind::SwiGlu => 3,
        FfnKind::Gelu => 2,
    };
    2 * c + 4 * c * c + ffn_mats * c * f
}

/// Closed-form total parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.hidden;
    let shuffle = if cfg.pixel_shuffle {
        SHUFFLE_FACTOR * SHUFFLE_FACTOR * c * c
    } else {
        0
    };
    let embedders = cfg.patch_dim() * c + c + cfg.max_image_tokens() * c + cfg.vocab * c + shuffle;
    embedders + (cfg.embed_depth + cfg.llm_depth) * layer_param_count(cfg) + c + c * cfg.vocab
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    cfg: ModelConfig,
    params: ParamStore<F>,
    ids: ModelIds,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for s in param_specs(&cfg) {
            let t = match s.init {
                Init::Normal(std) => normal_tensor(&s.shape, std, name_seed(cfg.seed, &s.name)),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, F::one()),
            };
            params.insert(s.name, t)?;
        }
        let ids = resolve_ids(&cfg, &params)?;
        Ok(Model { cfg, params, ids })
    }

    /// Rebuilds a model from stored tensors, requiring exactly the expected names,
    /// shapes and order.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        for s in &specs {
            let t = params
                .by_name(&s.name)
                .ok_or_else(|| CheckpointError::MissingTensor(s.name.clone()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
        }
        if let Some((_, name, _)) = params.iter().find(|(_, n, _)| !specs.iter().any(|s| s.name == *n)) {
            return Err(CheckpointError::UnexpectedTensor(name.to_string()).into());
        }
        // canonical order
        let mut ordered = ParamStore::new();
        for s in &specs {
            ordered.insert(s.name.clone(), params.by_name(&s.name).expect("checked").clone())?;
        }
        let ids = resolve_ids(&cfg, &ordered)?;
        Ok(Model {
            cfg,
            params: ordered,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub(crate) fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Embedders and embedding layers.
    pub fn embedding_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix("embed.")
    }

    pub fn llm_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix("llm.")
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    pub fn llm_hash(&self) -> String {
        self.params.hash_of(&self.llm_ids())
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        let mut params = ParamStore::new();
        for (_, name, t) in self.params.iter() {
            params.insert(name, t.cast()).expect("names are unique");
        }
        Model {
            cfg: self.cfg.clone(),
            params,
            ids: self.ids.clone(),
        }
    }
}

fn resolve_ids<F: Real>(cfg: &ModelConfig, p: &ParamStore<F>) -> Result<ModelIds> {
    let get = |n: String| p.id(&n).ok_or_else(|| Error::Config(format!("missing parameter {n}")));
    let layers = |prefix: &str, depth: usize| -> Result<Vec<LayerIds>> {
        (0..depth)
            .map(|i| {
                let n = |s: &str| format!("{prefix}.layers.{i}.{s}");
                Ok(LayerIds {
                    attn_norm: get(n("attn_norm"))?,
                    wq: get(n("wq"))?,
                    wk: get(n("wk"))?,
                    wv: get(n("wv"))?,
                    wo: get(n("wo"))?,
                    ffn_norm: get(n("ffn_norm"))?,
                    w_gate: match cfg.ffn {
                        FfnKind::SwiGlu => Some(get(n("w_gate"))?),
                        FfnKind::Gelu => None,
                    },
                    w_up: get(n("w_up"))?,
                    w_down: get(n("w_down"))?,
                })
            })
            .collect()
    };
    Ok(ModelIds {
        patch_w: get("embed.patch.weight".into())?,
        patch_b: get("embed.patch.bias".into())?,
        pos: get("embed.pos".into())?,
        text: get("embed.text".into())?,
        shuffle: if cfg.pixel_shuffle {
            Some(get("embed.shuffle.weight".into())?)
        } else {
            None
        },
        embed_layers: layers("embed", cfg.embed_depth)?,
        llm_layers: layers("llm", cfg.llm_depth)?,
        norm: get("llm.norm".into())?,
        head: get("llm.head".into())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NormKind;

    #[test]
    fn closed_form_count_matches_enumeration() {
        let mut cfgs = vec![ModelConfig::desk()];
        cfgs.push(ModelConfig {
            pixel_shuffle: true,
            ffn: FfnKind::Gelu,
            norm: NormKind::Layer,
            embed_depth: 0,
            ..ModelConfig::desk()
        });
        for cfg in cfgs {
            let m = Model::<f32>::new(cfg.clone()).unwrap();
            assert_eq!(m.params().numel(), param_count(&cfg));
        }
        let paper: usize = param_specs(&ModelConfig::paper())
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        assert_eq!(paper, param_count(&ModelConfig::paper()));
    }

    #[test]
    fn shared_layer_shapes_across_stacks() {
        let a = ModelConfig {
            embed_depth: 2,
            llm_depth: 3,
            ..ModelConfig::desk()
        };
        let b = ModelConfig {
            embed_depth: 0,
            llm_depth: 5,
            ..ModelConfig::desk()
        };
        let layer_sizes = |cfg: &ModelConfig| -> Vec<usize> {
            let mut specs = layer_specs(cfg, "embed", cfg.embed_depth);
            specs.extend(layer_specs(cfg, "llm", cfg.llm_depth));
            specs.chunks(9).map(|l| l.iter().map(|s| s.shape.iter().product::<usize>()).sum()).collect()
        };
        assert_eq!(layer_sizes(&a), layer_sizes(&b));
        assert!(layer_sizes(&a).iter().all(|&n| n == layer_param_count(&a)));
    }

    #[test]
    fn llm_weights_independent_of_embedding_depth() {
        let a = Model::<f32>::new(ModelConfig::desk()).unwrap();
        let b = Model::<f32>::new(ModelConfig {
            embed_depth: 0,
            ..ModelConfig::desk()
        })
        .unwrap();
        assert_eq!(a.llm_hash(), b.llm_hash());
    }

    #[test]
    fn from_parts_names_offending_tensor() {
        let m = Model::<f32>::new(ModelConfig::desk()).unwrap();
        let other = ModelConfig {
            hidden: 32,
            ..ModelConfig::desk()
        };
        let err = Model::from_parts(other, m.params().clone()).unwrap_err();
        match err {
            Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. }) => assert_eq!(name, "embed.patch.weight"),
            e => panic!("unexpected {e}"),
        }
        let back = Model::from_parts(ModelConfig::desk(), m.params().clone()).unwrap();
        assert_eq!(back.params().hash_all(), m.params().hash_all());
    }
}
