//! Text-to-image attention density.
//!
//! For every text query with at least one earlier image key, the weights on those
//! image keys are renormalized to sum to one; the row's density is the fraction of
//! its image keys whose renormalized weight is at least `tau`. The default `tau` is
//! the uniform share `1 / (image keys in the row)`. The record's density is the
//! mean over eligible rows.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::input::{Modality, TokenSequence};
use crate::model::{capture_attention, AttentionRecord, Model, Stack};
use crate::tensor::Real;

/// Relative slack when comparing a renormalized weight to the threshold.
const TAU_SLACK: f64 = 1e-9;

pub fn text_to_image_density(rec: &AttentionRecord, tau: Option<f64>) -> Result<f64> {
    if let Some(t) = tau {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Usage(format!("threshold {t} outside (0, 1]")));
        }
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for q in 0..rec.n {
        if rec.modality[q] != Modality::Text {
            continue;
        }
        let keys: Vec<usize> = (0..=q).filter(|&k| rec.modality[k] == Modality::Image).collect();
        if keys.is_empty() {
            continue;
        }
        rows += 1;
        let mass: f64 = keys.iter().map(|&k| rec.at(q, k)).sum();
        if mass <= 0.0 {
            continue;
        }
        let t = tau.unwrap_or(1.0 / keys.len() as f64) * (1.0 - TAU_SLACK);
        let hits = keys.iter().filter(|&&k| rec.at(q, k) / mass >= t).count();
        total += hits as f64 / keys.len() as f64;
    }
    if rows == 0 {
        return Err(Error::UndefinedMetric(
            "no text query attends to an earlier image key".into(),
        ));
    }
    Ok(total / rows as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityProfile {
    pub stack: Stack,
    pub layers: Vec<usize>,
    /// Mean over heads, one entry per probed layer.
    pub per_layer: Vec<f64>,
    /// `per_head[i][h]` for probed layer `i`.
    pub per_head: Vec<Vec<f64>>,
    pub n: usize,
    pub image_tokens: usize,
    pub tau: Option<f64>,
}

pub fn density_profile<F: Real>(
    model: &Model<F>,
    seq: &TokenSequence,
    stack: Stack,
    layers: &[usize],
    tau: Option<f64>,
) -> Result<DensityProfile> {
    let records = capture_attention(model, seq, stack, layers)?;
    let heads = model.config().heads;
    let mut per_head = vec![vec![0.0; heads]; layers.len()];
    for r in &records {
        let i = layers.iter().position(|&l| l == r.layer).expect("record for a probed layer");
        per_head[i][r.head] = text_to_image_density(r, tau)?;
    }
    let per_layer = per_head.iter().map(|h| h.iter().sum::<f64>() / heads as f64).collect();
    let n = records.first().map_or(0, |r| r.n);
    let image_tokens = records
        .first()
        .map_or(0, |r| r.modality.iter().filter(|&&m| m == Modality::Image).count());
    Ok(DensityProfile {
        stack,
        layers: layers.to_vec(),
        per_layer,
        per_head,
        n,
        image_tokens,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(modality: Vec<Modality>, weights: Vec<f64>) -> AttentionRecord {
        AttentionRecord {
            stack: Stack::Llm,
            layer: 0,
            head: 0,
            n: modality.len(),
            weights,
            modality,
        }
    }

    /// Causal rows: image tokens first, then text.
    fn layout(images: usize, texts: usize) -> Vec<Modality> {
        let mut m = vec![Modality::Image; images];
        m.extend(vec![Modality::Text; texts]);
        m
    }

    fn rows_from(n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut w = vec![0.0; n * n];
        for q in 0..n {
            let raw: Vec<f64> = (0..=q).map(|k| f(q, k)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..=q {
                w[q * n + k] = raw[k] / s;
            }
        }
        w
    }

    #[test]
    fn uniform_is_one_and_one_hot_is_reciprocal() {
        let m = layout(5, 3);
        let uniform = record(m.clone(), rows_from(8, |_, _| 1.0));
        assert!((text_to_image_density(&uniform, None).unwrap() - 1.0).abs() < 1e-12);
        let one_hot = record(m, rows_from(8, |q, k| if k == 0 || k == q { 1.0 } else { 1e-300 }));
        assert!((text_to_image_density(&one_hot, None).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn no_eligible_rows_is_undefined() {
        let r = record(layout(0, 4), rows_from(4, |_, _| 1.0));
        assert!(matches!(text_to_image_density(&r, None), Err(Error::UndefinedMetric(_))));
        let r = record(vec![Modality::Text, Modality::Image], rows_from(2, |_, _| 1.0));
        assert!(text_to_image_density(&r, None).is_err());
    }

    fn double_loop_oracle(r: &AttentionRecord) -> f64 {
        let mut sum = 0.0;
        let mut rows = 0.0;
        for q in 0..r.n {
            if r.modality[q] != Modality::Text {
                continue;
            }
            let mut mass = 0.0;
            let mut m = 0.0;
            for k in 0..=q {
                if r.modality[k] == Modality::Image {
                    mass += r.at(q, k);
                    m += 1.0;
                }
            }
            if m == 0.0 {
                continue;
            }
            rows += 1.0;
            let mut hits = 0.0;
            for k in 0..=q {
                if r.modality[k] == Modality::Image && r.at(q, k) / mass >= (1.0 / m) * (1.0 - 1e-9) {
                    hits += 1.0;
                }
            }
            sum += hits / m;
        }
        sum / rows
    }

    proptest! {
        #[test]
        fn matches_double_loop(seed in proptest::collection::vec(0.01f64..5.0, 64), mask in 0u8..=255) {
            let mut m: Vec<Modality> = (0..8).map(|i| if mask >> i & 1 == 1 { Modality::Image } else { Modality::Text }).collect();
            m[0] = Modality::Image;
            m[7] = Modality::Text;
            let r = record(m, rows_from(8, |q, k| seed[q * 8 + k]));
            prop_assert_eq!(text_to_image_density(&r, None).unwrap(), double_loop_oracle(&r));
        }

        #[test]
        fn invariant_to_permuting_image_keys(seed in proptest::collection::vec(0.01f64..5.0, 36)) {
            // three image keys followed by three text queries; swap keys 0 and 2 in every row
            let w = rows_from(6, |q, k| seed[q * 6 + k]);
            let mut p = w.clone();
            for q in 0..6 {
                if q >= 2 {
                    p.swap(q * 6, q * 6 + 2);
                }
            }
            let a = text_to_image_density(&record(layout(3, 3), w), None).unwrap();
            let b = text_to_image_density(&record(layout(3, 3), p), None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
