//! Frozen feature targets: a vision teacher over patch tokens and a text-embedding table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::input::tiling::ImagePatches;
use crate::input::TokenSequence;
use crate::model::pixels_tensor;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// Two-layer bidirectional patch transformer applied per tile.
    Transformer,
    /// Fixed linear map of patch pixels.
    Linear,
}

const VISION_LAYERS: usize = 2;
const VISION_STD: f64 = 0.05;
const TEXT_STD: f64 = 0.02;

pub struct TeacherBundle<F> {
    pub kind: TeacherKind,
    hidden: usize,
    heads: usize,
    tokens_per_tile: usize,
    patch_dim: usize,
    params: ParamStore<F>,
}

fn normal<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| F::lit(dist.sample(rng))).collect()).expect("numel matches shape")
}

/// Frozen random teachers sized to a student configuration, fully determined by `seed`.
pub fn make_desk_teachers<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<TeacherBundle<F>> {
    make_teachers(cfg, seed, TeacherKind::Transformer)
}

pub fn make_teachers<F: Real>(cfg: &ModelConfig, seed: u64, kind: TeacherKind) -> Result<TeacherBundle<F>> {
    cfg.validate()?;
    let c = cfg.hidden;
    let pd = cfg.patch_dim();
    let ntok = cfg.tokens_per_tile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_6163_6865_7273);
    let mut p = ParamStore::new();
    p.insert("teacher.text", normal(&mut rng, &[cfg.vocab, c], TEXT_STD))?;
    // pixel inputs lie in [0, 1]; scale so projected features have unit-order spread
    let proj_std = 1.0 / (pd as f64).sqrt();
    p.insert("teacher.vision.proj", normal(&mut rng, &[pd, c], proj_std))?;
    if kind == TeacherKind::Transformer {
        p.insert("teacher.vision.pos", normal(&mut rng, &[ntok, c], VISION_STD))?;
        let s = 1.0 / (c as f64).sqrt();
        for i in 0..VISION_LAYERS {
            p.insert(format!("teacher.vision.{i}.wq"), normal(&mut rng, &[c, c], s))?;
            p.insert(format!("teacher.vision.{i}.wk"), normal(&mut rng, &[c, c], s))?;
            p.insert(format!("teacher.vision.{i}.wv"), normal(&mut rng, &[c, c], s))?;
            p.insert(format!("teacher.vision.{i}.wo"), normal(&mut rng, &[c, c], s))?;
            p.insert(format!("teacher.vision.{i}.w1"), normal(&mut rng, &[c, 2 * c], s))?;
            p.insert(format!("teacher.vision.{i}.w2"), normal(&mut rng, &[2 * c, c], s / 2f64.sqrt()))?;
        }
    }
    Ok(TeacherBundle {
        kind,
        hidden: c,
        heads: cfg.heads,
        tokens_per_tile: ntok,
        patch_dim: pd,
        params: p,
    })
}

impl<F: Real> TeacherBundle<F> {
    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn hash(&self) -> String {
        self.params.hash_all()
    }

    fn get(&self, name: &str) -> Tensor<F> {
        self.params.by_name(name).expect("teacher tensor exists").clone()
    }

    pub fn text_table(&self) -> &Tensor<F> {
        self.params.by_name("teacher.text").expect("teacher tensor exists")
    }

    /// Target features for text ids: rows of the frozen table.
    pub fn text_features(&self, ids: &[u32]) -> Result<Tensor<F>> {
        let t = self.text_table();
        let mut data = Vec::with_capacity(ids.len() * self.hidden);
        for &id in ids {
            if id as usize >= t.rows() {
                return Err(Error::Input(format!("token id {id} outside teacher vocabulary {}", t.rows())));
            }
            data.extend_from_slice(t.row(id as usize));
        }
        Tensor::new(vec![ids.len(), self.hidden], data)
    }

    /// Teacher features for a whole sequence: image rows from the vision teacher,
    /// every other row from the text table.
    pub fn sequence_features(&self, seq: &TokenSequence) -> Result<Tensor<F>> {
        let mut out = self.text_features(&seq.ids)?;
        if let Some(block) = &seq.image {
            let img = self.image_features(&block.patches)?;
            for (i, r) in block.range().enumerate() {
                out.row_mut(r).copy_from_slice(img.row(i));
            }
        }
        Ok(out)
    }

    /// Target features, one row per patch token, each tile encoded independently.
    pub fn image_features(&self, patches: &ImagePatches) -> Result<Tensor<F>> {
        if patches.patch_dim() != self.patch_dim || patches.grid_side * patches.grid_side != self.tokens_per_tile {
            return Err(Error::Dimension(format!(
                "teacher expects {} tokens of size {} per tile",
                self.tokens_per_tile, self.patch_dim
            )));
        }
        let px = pixels_tensor::<F>(patches)?;
        let mut g = Graph::<F>::inference();
        let x = g.constant(px);
        let proj = g.constant(self.get("teacher.vision.proj"));
        let feats = g.matmul(x, proj)?;
        if self.kind == TeacherKind::Linear {
            return Ok(g.value(feats).clone());
        }
        let pos = g.constant(self.get("teacher.vision.pos"));
        let mut layers = Vec::with_capacity(VISION_LAYERS);
        for i in 0..VISION_LAYERS {
            let w = |n: &str| format!("teacher.vision.{i}.{n}");
            let names = ["wq", "wk", "wv", "wo", "w1", "w2"].map(|n| g.constant(self.get(&w(n))));
            layers.push(names);
        }
        let ones = g.constant(Tensor::full(&[self.hidden], F::one()));
        let eps = F::lit(1e-6);
        let n = self.tokens_per_tile;
        let mut tiles = Vec::with_capacity(patches.tile_count);
        for t in 0..patches.tile_count {
            let rows: Vec<usize> = (t * n..(t + 1) * n).collect();
            let mut h = g.gather_rows(feats, &rows)?;
            h = g.add(h, pos)?;
            for [wq, wk, wv, wo, w1, w2] in layers.iter().copied() {
                let a = g.layer_norm(h, ones, eps)?;
                let (q, k, v) = (g.matmul(a, wq)?, g.matmul(a, wk)?, g.matmul(a, wv)?);
                let o = g.full_attention(q, k, v, self.heads)?;
                let o = g.matmul(o, wo)?;
                h = g.add(h, o)?;
                let a = g.layer_norm(h, ones, eps)?;
                let m = g.matmul(a, w1)?;
                let m = g.gelu(m)?;
                let m = g.matmul(m, w2)?;
                h = g.add(h, m)?;
            }
            tiles.push(h);
        }
        let out: Var = if tiles.len() == 1 {
            tiles[0]
        } else {
            g.concat_rows(&tiles)?
        };
        Ok(g.value(out).clone())
    }
}
