//! Mixed image/text token sequences with modality and loss masks.

use std::ops::Range;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::input::image::RawImage;
use crate::input::tiling::{dyn_process, patchify, ImagePatches};
use crate::input::tokenizer::{BOS, EOS, IMG_CONTEXT, IMG_END, IMG_START};

/// Random text tokens per distillation sample, split evenly into query and response.
pub const DISTILL_TEXT_TOKENS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBlock {
    pub start: usize,
    pub patches: ImagePatches,
}

impl ImageBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.patches.tokens()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    /// Text ids; image positions hold [`IMG_CONTEXT`].
    pub ids: Vec<u32>,
    pub modality: Vec<Modality>,
    pub loss_mask: Vec<bool>,
    pub image: Option<ImageBlock>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_range(&self) -> Range<usize> {
        self.image.as_ref().map_or(0..0, ImageBlock::range)
    }

    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.modality[i] == Modality::Text).collect()
    }

    pub fn text_ids(&self) -> Vec<u32> {
        self.text_positions().into_iter().map(|i| self.ids[i]).collect()
    }

    /// Appends one unsupervised text token.
    pub fn push_text(&mut self, id: u32) {
        self.ids.push(id);
        self.modality.push(Modality::Text);
        self.loss_mask.push(false);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.modality.len() != n || self.loss_mask.len() != n {
            return Err(Error::Data(format!(
                "mask lengths {}/{} differ from sequence length {n}",
                self.modality.len(),
                self.loss_mask.len()
            )));
        }
        let range = self.image_range();
        if range.end > n {
            return Err(Error::Data("image block extends past the sequence".into()));
        }
        for i in 0..n {
            let in_block = range.contains(&i);
            if in_block != (self.modality[i] == Modality::Image) {
                return Err(Error::Data(format!("modality flag disagrees with image block at {i}")));
            }
            if in_block && self.loss_mask[i] {
                return Err(Error::Data(format!("loss mask set on image position {i}")));
            }
        }
        Ok(())
    }
}

fn prefix(image: Option<ImagePatches>, query: &[u32]) -> TokenSequence {
    let mut seq = TokenSequence {
        ids: Vec::new(),
        modality: Vec::new(),
        loss_mask: Vec::new(),
        image: None,
    };
    seq.push_text(BOS);
    if let Some(patches) = image {
        seq.push_text(IMG_START);
        let start = seq.len();
        for _ in 0..patches.tokens() {
            seq.ids.push(IMG_CONTEXT);
            seq.modality.push(Modality::Image);
            seq.loss_mask.push(false);
        }
        seq.image = Some(ImageBlock { start, patches });
        seq.push_text(IMG_END);
    }
    for &id in query {
        seq.push_text(id);
    }
    seq
}

/// `[bos, img_start, image, img_end, query, response, eos]`, supervising the
/// response and eos. Without an image the three image entries are omitted.
pub fn assemble_sample(image: Option<ImagePatches>, query: &[u32], response: &[u32]) -> Result<TokenSequence> {
    if response.is_empty() {
        return Err(Error::Data("empty response".into()));
    }
    let mut seq = prefix(image, query);
    for &id in response.iter().chain(std::iter::once(&EOS)) {
        seq.ids.push(id);
        seq.modality.push(Modality::Text);
        seq.loss_mask.push(true);
    }
    Ok(seq)
}

/// Generation prompt: the sample layout up to the end of the query.
pub fn assemble_prompt(image: Option<ImagePatches>, query: &[u32]) -> TokenSequence {
    prefix(image, query)
}

/// Tiles and patchifies an image with the model's geometry.
pub fn encode_image(img: &RawImage, cfg: &ModelConfig) -> Result<ImagePatches> {
    let ts = dyn_process(img, cfg.tile_size, cfg.max_tiles)?;
    patchify(&ts, cfg.patch_stride)
}

/// Uniform random query/response ids over `0..vocab`, 50 each.
pub fn random_distill_ids<R: Rng + ?Sized>(rng: &mut R, vocab: u32) -> Result<(Vec<u32>, Vec<u32>)> {
    if vocab == 0 {
        return Err(Error::Usage("vocab must be at least 1".into()));
    }
    let half = DISTILL_TEXT_TOKENS / 2;
    let mut draw = || (0..half).map(|_| rng.random_range(0..vocab)).collect::<Vec<_>>();
    let query = draw();
    let response = draw();
    Ok((query, response))
}

/// Uniform-noise image of one tile plus 100 uniform text ids over the
/// non-special vocabulary `0..vocab`.
pub fn random_distill_sample<R: Rng + ?Sized>(
    rng: &mut R,
    vocab: u32,
    cfg: &ModelConfig,
) -> Result<(RawImage, TokenSequence)> {
    let side = cfg.tile_size;
    let mut pixels = vec![0u8; side * side * 3];
    rng.fill(pixels.as_mut_slice());
    let img = RawImage::new(side, side, pixels)?;
    let (query, response) = random_distill_ids(rng, vocab)?;
    let seq = assemble_sample(Some(encode_image(&img, cfg)?), &query, &response)?;
    Ok((img, seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::tokenizer::BYTE_VOCAB;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn patches(tokens_side: usize) -> ImagePatches {
        ImagePatches {
            tile_count: 2,
            grid_side: tokens_side,
            stride: 1,
            pixels: vec![0; 2 * tokens_side * tokens_side * 3],
        }
    }

    #[test]
    fn text_only_layout() {
        let s = assemble_sample(None, &[10, 11], &[12]).unwrap();
        assert_eq!(s.ids, vec![BOS, 10, 11, 12, EOS]);
        assert_eq!(s.loss_mask, vec![false, false, false, true, true]);
        assert!(s.image.is_none());
        s.validate().unwrap();
    }

    #[test]
    fn image_layout() {
        let s = assemble_sample(Some(patches(2)), &[1], &[2, 3]).unwrap();
        assert_eq!(s.len(), 2 + 8 + 1 + 1 + 2 + 1);
        assert_eq!(s.ids[1], IMG_START);
        assert_eq!(s.image_range(), 2..10);
        assert_eq!(s.ids[10], IMG_END);
        assert_eq!(s.loss_mask.iter().filter(|&&m| m).count(), 3);
        s.validate().unwrap();
    }

    #[test]
    fn empty_response_is_data_error() {
        assert!(matches!(assemble_sample(None, &[1], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn distill_sample_shape_and_determinism() {
        let cfg = ModelConfig::desk();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let (img, s) = random_distill_sample(&mut a, BYTE_VOCAB, &cfg).unwrap();
        assert_eq!(img.width(), 32);
        // bos, img_start, img_end, eos around 100 random ids
        assert_eq!(s.text_positions().len(), DISTILL_TEXT_TOKENS + 4);
        assert_eq!(s.loss_mask.iter().filter(|&&m| m).count(), 51);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_distill_sample(&mut b, BYTE_VOCAB, &cfg).unwrap().1, s);
        let mut c = ChaCha8Rng::seed_from_u64(2);
        assert_ne!(random_distill_sample(&mut c, BYTE_VOCAB, &cfg).unwrap().1, s);
        assert!(random_distill_ids(&mut c, 0).is_err());
    }

    #[test]
    fn distill_ids_are_uniform() {
        let cfg = ModelConfig {
            tile_size: 8,
            patch_stride: 8,
            max_tiles: 1,
            ..ModelConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bins = BYTE_VOCAB as usize;
        let mut counts = vec![0u64; bins];
        for _ in 0..100_000 {
            let (_, s) = random_distill_sample(&mut rng, BYTE_VOCAB, &cfg).unwrap();
            let text = s.text_ids();
            for &id in &text[3..text.len() - 1] {
                counts[id as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        assert_eq!(total, 100_000 * DISTILL_TEXT_TOKENS as u64);
        let expected = total as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    proptest! {
        #[test]
        fn loss_mask_never_on_image(q in proptest::collection::vec(0u32..256, 0..20),
                                    r in proptest::collection::vec(0u32..256, 1..20),
                                    with_image in any::<bool>()) {
            let img = with_image.then(|| patches(2));
            let s = assemble_sample(img, &q, &r).unwrap();
            s.validate().unwrap();
            prop_assert_eq!(s.loss_mask.iter().filter(|&&m| m).count(), r.len() + 1);
            for i in s.image_range() {
                prop_assert!(!s.loss_mask[i]);
            }
        }
    }
}
