//! AdamW with decoupled weight decay, plus warmup/constant and warmup/cosine schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Optimizer state: first/second moments per parameter and the shared step count.
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments<F>>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `ids` at learning rate `lr`.
    ///
    /// Weight decay is applied to matrices only (tensors of rank >= 2); gains and
    /// biases are not decayed.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>, ids: &[ParamId], lr: f64) -> Result<()> {
        for &id in ids {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::Optimizer(format!("no gradient for {}", store.name(id))))?;
            if g.shape() != store.get(id).shape() {
                return Err(Error::Optimizer(format!(
                    "gradient shape {:?} for {} of shape {:?}",
                    g.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let lr_f = F::lit(lr);
        let eps = F::lit(c.eps);
        for &id in ids {
            let g = grads.get(id).expect("checked above").data();
            let p = store.get_mut(id);
            let decay = if p.shape().len() >= 2 {
                F::lit(1.0 - lr * c.weight_decay)
            } else {
                F::one()
            };
            let mom = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![F::zero(); g.len()],
                v: vec![F::zero(); g.len()],
            });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
                *w *= decay;
                *m = b1 * *m + (F::one() - b1) * gi;
                *v = b2 * *v + (F::one() - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Linear warmup to `peak`, then constant or cosine decay to `min_lr` at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        match self.kind {
            ScheduleKind::Constant => self.peak,
            ScheduleKind::Cosine => {
                let span = self.total.saturating_sub(self.warmup).max(1) as f64;
                let progress = ((step - self.warmup) as f64 / span).min(1.0);
                self.min_lr + (self.peak - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::new(vec![1, 1], vec![value]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let (mut s, id) = single(0.7);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::zeros(&[1, 1]));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut s, &g, &[id], 1e-2).unwrap();
        }
        assert_eq!(s.get(id).item(), 0.7);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn memoryless_update_is_normalized_gradient_step() {
        // beta1 = beta2 = 0: step = lr * g / (|g| + eps)
        let (mut s, id) = single(1.0);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::new(vec![1, 1], vec![-0.3]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
        });
        opt.step(&mut s, &g, &[id], 0.1).unwrap();
        let expected = 1.0 - 0.1 * (-0.3) / (0.3 + 1e-8);
        assert!((s.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_rolled_recurrence() {
        let (mut s, id) = single(0.5);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::new(vec![1, 1], vec![0.2]).unwrap());
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut s, &g, &[id], 0.01).unwrap();
        opt.step(&mut s, &g, &[id], 0.01).unwrap();

        // reference recurrence written out independently
        let (lr, gr) = (0.01f64, 0.2f64);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            w -= lr * 0.1 * w;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.get(id).item() - w).abs() < 1e-14);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, id) = single(0.5);
        let g = ParamGrads::new(1);
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s, &g, &[id], 0.1), Err(Error::Optimizer(_))));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn schedules() {
        let c = LrSchedule {
            kind: ScheduleKind::Constant,
            peak: 1.0,
            warmup: 4,
            total: 10,
            min_lr: 0.0,
        };
        assert_eq!(c.lr_at(0), 0.25);
        assert_eq!(c.lr_at(3), 1.0);
        assert_eq!(c.lr_at(9), 1.0);
        let cos = LrSchedule {
            kind: ScheduleKind::Cosine,
            ..c
        };
        assert_eq!(cos.lr_at(4), 1.0);
        assert!((cos.lr_at(7) - 0.5).abs() < 1e-12);
        assert!(cos.lr_at(10).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 4..10 {
            assert!(cos.lr_at(s) <= prev);
            prev = cos.lr_at(s);
        }
    }
}
