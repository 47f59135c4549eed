//! Held-out loss and exact-match answer accuracy.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::input::sequence::{assemble_prompt, encode_image};
use crate::input::tokenizer::{detokenize, tokenize, EOS};
use crate::input::TokenSequence;
use crate::model::{generate, GenerateOptions, Model, Session};
use crate::tensor::Real;

/// Mean next-token loss over sequences with at least one supervised token.
pub fn eval_lm_loss<F: Real>(model: &Model<F>, data: &[TokenSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for seq in data {
        let mut s = Session::inference(model);
        match s.lm_loss(seq) {
            Ok(l) => {
                total += s.graph.value(l).item().to_f64_lossless();
                n += 1;
            }
            Err(Error::DegenerateBatch) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(total / n as f64)
}

/// Greedy answer for one sample's image and query, decoded to bytes.
pub fn answer<F: Real>(model: &Model<F>, sample: &Sample, max_new: usize) -> Result<Vec<u8>> {
    let patches = sample.image.as_ref().map(|img| encode_image(img, model.config())).transpose()?;
    let prompt = assemble_prompt(patches, &tokenize(&sample.query));
    let out = generate(model, &prompt, GenerateOptions::greedy(max_new))?;
    let end = out.ids.iter().position(|&id| id == EOS).unwrap_or(out.ids.len());
    Ok(detokenize(&out.ids[..end]))
}

/// Fraction of samples whose greedy answer equals the reference exactly.
pub fn answer_accuracy<F: Real>(model: &Model<F>, samples: &[Sample], max_new: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no evaluation samples".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        if answer(model, s, max_new)? == s.response {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
