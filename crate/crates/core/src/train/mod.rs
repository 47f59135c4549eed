//! Stage plans and training loops: distillation, frozen-backbone alignment,
//! full instruction tuning, and backbone warm start on text.

pub mod eval;
pub mod objective;
pub mod teacher;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::input::sequence::{assemble_sample, encode_image, random_distill_sample, random_distill_ids};
use crate::input::tokenizer::{tokenize, BYTE_VOCAB};
use crate::input::{Modality, TokenSequence};
use crate::model::{Model, Session};
use crate::optim::{AdamW, AdamWConfig, LrSchedule, ScheduleKind};
use crate::params::ParamId;
use crate::tensor::Real;

pub use objective::{batch_mean, distill_loss, distill_objective, DistillTerms};
pub use teacher::{make_desk_teachers, make_teachers, TeacherBundle, TeacherKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    Distill,
    Align,
    Instruct,
    /// Warm start of the backbone on teacher features (stands in for a pretrained LLM).
    Backbone,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Distill => "distill",
            StageId::Align => "align",
            StageId::Instruct => "instruct",
            StageId::Backbone => "backbone",
        }
    }

    /// Parameters a stage is allowed to update.
    pub fn trainable(self) -> TrainableSet {
        match self {
            StageId::Distill | StageId::Align => TrainableSet::Embedding,
            StageId::Instruct => TrainableSet::All,
            StageId::Backbone => TrainableSet::Backbone,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainableSet {
    Embedding,
    Backbone,
    All,
}

impl TrainableSet {
    pub fn select<F: Real>(self, model: &Model<F>) -> Vec<ParamId> {
        match self {
            TrainableSet::Embedding => model.embedding_ids(),
            TrainableSet::Backbone => model.llm_ids(),
            TrainableSet::All => model.all_ids(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warmup {
    Steps(usize),
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: StageId,
    pub schedule: ScheduleKind,
    pub peak_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    pub warmup: Warmup,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

const PAPER_BATCH: usize = 4096;

impl StagePlan {
    pub fn preset(preset: Preset, stage: StageId) -> StagePlan {
        match preset {
            Preset::Desk => Self::desk(stage),
            Preset::Paper => Self::paper(stage),
        }
    }

    /// One-CPU defaults: learning rates of the published recipe with the two later
    /// stages raised tenfold, batch 32.
    pub fn desk(stage: StageId) -> StagePlan {
        let (schedule, peak_lr, warmup, steps, weight_decay) = match stage {
            StageId::Distill => (ScheduleKind::Constant, 3e-4, Warmup::Steps(50), 2000, 0.05),
            StageId::Align => (ScheduleKind::Cosine, 5e-4, Warmup::Steps(10), 1000, 0.01),
            StageId::Instruct => (ScheduleKind::Cosine, 4e-4, Warmup::Ratio(0.03), 500, 0.01),
            StageId::Backbone => (ScheduleKind::Cosine, 1e-3, Warmup::Steps(20), 600, 0.01),
        };
        StagePlan {
            stage,
            schedule,
            peak_lr,
            min_lr: 0.0,
            warmup,
            steps,
            batch_size: 32,
            weight_decay,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }

    /// Published recipe: batch 4096; 500M, 50M and 5M samples; warmup 2000 steps,
    /// 100 steps and ratio 0.03; learning rates 3e-4, 5e-5 and 4e-5.
    pub fn paper(stage: StageId) -> StagePlan {
        let (schedule, peak_lr, warmup, samples, weight_decay) = match stage {
            StageId::Distill => (ScheduleKind::Constant, 3e-4, Warmup::Steps(2000), 500_000_000usize, 0.05),
            StageId::Align => (ScheduleKind::Cosine, 5e-5, Warmup::Steps(100), 50_000_000, 0.01),
            StageId::Instruct => (ScheduleKind::Cosine, 4e-5, Warmup::Ratio(0.03), 5_000_000, 0.01),
            StageId::Backbone => return Self::desk(stage),
        };
        StagePlan {
            stage,
            schedule,
            peak_lr,
            min_lr: 0.0,
            warmup,
            steps: samples.div_ceil(PAPER_BATCH),
            batch_size: PAPER_BATCH,
            weight_decay,
            grad_clip: None,
            seed: 0,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.steps * self.batch_size
    }

    pub fn warmup_steps(&self) -> usize {
        match self.warmup {
            Warmup::Steps(n) => n,
            Warmup::Ratio(r) => (r * self.steps as f64).round() as usize,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            peak: self.peak_lr,
            warmup: self.warmup_steps(),
            total: self.steps,
            min_lr: self.min_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_steps() > self.steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds {} steps",
                self.warmup_steps(),
                self.steps
            )));
        }
        if !(self.peak_lr > 0.0) || self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates and weight decay must be nonnegative".into()));
        }
        if let Warmup::Ratio(r) = self.warmup {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("warmup ratio {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn expect_stage(&self, stage: StageId) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::Usage(format!(
                "plan for stage {} passed to the {} loop",
                self.stage.name(),
                stage.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: StageId,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub wall_seconds: f64,
    /// Samples dropped because nothing in them was supervised.
    pub skipped_samples: usize,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean loss of the final `k` steps.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let k = k.clamp(1, n);
        Some(self.steps[n - k..].iter().map(|s| s.loss).sum::<f64>() / k as f64)
    }
}

/// Loss over one batch and the number of samples skipped while building it.
pub struct BatchLoss {
    pub loss: Option<Var>,
    pub skipped: usize,
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

/// Generic loop: build a loss on a fresh graph, back-propagate into the trainable
/// set only, clip, and apply AdamW.
pub fn train_loop<F: Real>(
    model: &mut Model<F>,
    plan: &StagePlan,
    mut batch: impl FnMut(&mut Session<'_, F>, usize) -> Result<BatchLoss>,
) -> Result<TrainReport> {
    plan.validate()?;
    let trainable = plan.stage.trainable().select(model);
    let schedule = plan.lr_schedule();
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: plan.weight_decay,
        ..AdamWConfig::default()
    });
    let start = Instant::now();
    let mut report = TrainReport {
        stage: plan.stage,
        seed: plan.seed,
        steps: Vec::with_capacity(plan.steps),
        wall_seconds: 0.0,
        skipped_samples: 0,
        checkpoint: None,
    };
    for step in 0..plan.steps {
        let lr = schedule.lr_at(step);
        let (loss, mut grads) = {
            let mut s = Session::train(model, &trainable);
            let b = batch(&mut s, step).map_err(|e| at_step(e, step))?;
            report.skipped_samples += b.skipped;
            let Some(loss) = b.loss else {
                continue;
            };
            let value = s.graph.value(loss).item().to_f64_lossless();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("step {step}: loss is {value}")));
            }
            (value, s.gradients(loss).map_err(|e| at_step(e, step))?)
        };
        if let Some(clip) = plan.grad_clip {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(F::lit(clip / norm));
            }
        }
        let present = grads.present();
        opt.step(model.params_mut(), &grads, &present, lr)?;
        report.steps.push(StepRecord {
            step,
            loss,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Cycles through `0..len` in a fresh seeded permutation each epoch.
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        let mut s = EpochSampler {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillText {
    /// 50 + 50 uniform random byte ids per image.
    Random,
    /// The text paired with the image in the dataset.
    Paired,
}

/// Where distillation images and text come from. Without a dataset, images are
/// uniform noise of one tile.
#[derive(Clone, Copy)]
pub struct DistillData<'a> {
    pub images: Option<&'a [Sample]>,
    pub text: DistillText,
}

impl DistillData<'_> {
    pub fn random() -> Self {
        DistillData {
            images: None,
            text: DistillText::Random,
        }
    }
}

/// Trains the embedding parameters to reproduce teacher features.
pub fn run_distillation<F: Real>(
    plan: &StagePlan,
    teachers: &TeacherBundle<F>,
    model: &mut Model<F>,
    data: DistillData<'_>,
) -> Result<TrainReport> {
    plan.expect_stage(StageId::Distill)?;
    if data.images.is_none() && data.text == DistillText::Paired {
        return Err(Error::Config("paired distillation text needs a dataset".into()));
    }
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut sampler = data
        .images
        .map(|s| EpochSampler::new(s.len(), plan.seed ^ 0x5eed))
        .transpose()?;
    let mut draw = move || -> Result<TokenSequence> {
        match (data.images, sampler.as_mut()) {
            (Some(samples), Some(sampler)) => {
                let s = &samples[sampler.next_index()];
                let img = s
                    .image
                    .as_ref()
                    .ok_or_else(|| Error::Data("distillation sample without an image".into()))?;
                let patches = encode_image(img, &cfg)?;
                let (q, r) = match data.text {
                    DistillText::Random => random_distill_ids(&mut rng, BYTE_VOCAB)?,
                    DistillText::Paired => (tokenize(&s.query), tokenize(&s.response)),
                };
                let r = if r.is_empty() { tokenize(b" ") } else { r };
                assemble_sample(Some(patches), &q, &r)
            }
            _ => Ok(random_distill_sample(&mut rng, BYTE_VOCAB, &cfg)?.1),
        }
    };
    let batch_size = plan.batch_size;
    train_loop(model, plan, |s, _| {
        let mut losses = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let seq = draw()?;
            losses.push(distill_objective(s, teachers, &seq)?.total);
        }
        Ok(BatchLoss {
            loss: Some(batch_mean(&mut s.graph, &losses)?),
            skipped: 0,
        })
    })
}

fn lm_batch<F: Real>(
    s: &mut Session<'_, F>,
    data: &[TokenSequence],
    sampler: &mut EpochSampler,
    batch_size: usize,
) -> Result<BatchLoss> {
    let mut losses = Vec::with_capacity(batch_size);
    let mut skipped = 0;
    for _ in 0..batch_size {
        let seq = &data[sampler.next_index()];
        match s.lm_loss(seq) {
            Ok(l) => losses.push(l),
            Err(Error::DegenerateBatch) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let loss = if losses.is_empty() {
        None
    } else {
        Some(batch_mean(&mut s.graph, &losses)?)
    };
    Ok(BatchLoss { loss, skipped })
}

fn run_lm_stage<F: Real>(
    plan: &StagePlan,
    stage: StageId,
    model: &mut Model<F>,
    data: &[TokenSequence],
) -> Result<TrainReport> {
    plan.expect_stage(stage)?;
    let mut sampler = EpochSampler::new(data.len(), plan.seed)?;
    let batch_size = plan.batch_size;
    train_loop(model, plan, |s, _| lm_batch(s, data, &mut sampler, batch_size))
}

/// Next-token training of the embedding parameters through a frozen backbone.
pub fn run_alignment<F: Real>(plan: &StagePlan, model: &mut Model<F>, data: &[TokenSequence]) -> Result<TrainReport> {
    run_lm_stage(plan, StageId::Align, model, data)
}

/// Next-token training of every parameter.
pub fn run_instruction_tuning<F: Real>(
    plan: &StagePlan,
    model: &mut Model<F>,
    data: &[TokenSequence],
) -> Result<TrainReport> {
    run_lm_stage(plan, StageId::Instruct, model, data)
}

/// Pretraining of the backbone as if paired with the teachers: image positions read
/// frozen teacher image features, text positions read the frozen teacher text table,
/// and every next text token is supervised.
pub fn run_backbone_warmstart<F: Real>(
    plan: &StagePlan,
    teachers: &TeacherBundle<F>,
    model: &mut Model<F>,
    data: &[TokenSequence],
) -> Result<TrainReport> {
    plan.expect_stage(StageId::Backbone)?;
    if model.config().pixel_shuffle && data.iter().any(|t| t.image.is_some()) {
        return Err(Error::Config("backbone warm start on images needs pixel_shuffle off".into()));
    }
    let mut sampler = EpochSampler::new(data.len(), plan.seed)?;
    let batch_size = plan.batch_size;
    train_loop(model, plan, |s, _| {
        let mut losses = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let seq = &data[sampler.next_index()];
            let x = s.graph.constant(teachers.sequence_features(seq)?);
            let logits = s.llm_forward(x)?;
            let n = seq.len();
            let targets: Vec<usize> = (0..n).map(|p| seq.ids.get(p + 1).map_or(0, |&id| id as usize)).collect();
            let mask: Vec<bool> = (0..n).map(|p| p + 1 < n && seq.modality[p + 1] == Modality::Text).collect();
            losses.push(s.graph.cross_entropy(logits, &targets, &mask)?);
        }
        Ok(BatchLoss {
            loss: Some(batch_mean(&mut s.graph, &losses)?),
            skipped: 0,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_samples, DatasetKind, DatasetSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 2,
            embed_depth: 1,
            llm_depth: 1,
            ..ModelConfig::desk()
        }
    }

    fn plan(stage: StageId, steps: usize) -> StagePlan {
        StagePlan {
            steps,
            batch_size: 2,
            warmup: Warmup::Steps(0),
            ..StagePlan::desk(stage)
        }
    }

    fn shapes(n: usize) -> Vec<Sample> {
        generate_samples(&DatasetSpec {
            kind: DatasetKind::ShapesCaption,
            count: n,
            seed: 0,
            image_size: 32,
        })
        .unwrap()
    }

    #[test]
    fn presets() {
        let p = StagePlan::paper(StageId::Distill);
        assert_eq!((p.batch_size, p.peak_lr, p.warmup_steps()), (4096, 3e-4, 2000));
        assert!(p.total_samples() >= 500_000_000);
        let a = StagePlan::paper(StageId::Align);
        assert_eq!((a.peak_lr, a.warmup_steps(), a.schedule), (5e-5, 100, ScheduleKind::Cosine));
        let i = StagePlan::paper(StageId::Instruct);
        assert_eq!(i.warmup_steps(), (0.03 * i.steps as f64).round() as usize);
        for s in [StageId::Distill, StageId::Align, StageId::Instruct] {
            StagePlan::desk(s).validate().unwrap();
            StagePlan::paper(s).validate().unwrap();
        }
        let bad = StagePlan {
            warmup: Warmup::Steps(10),
            steps: 5,
            ..StagePlan::desk(StageId::Align)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_selects_expected_parameters() {
        let m = Model::<f32>::new(tiny()).unwrap();
        assert_eq!(StageId::Instruct.trainable().select(&m).len(), m.params().len());
        let e = StageId::Align.trainable().select(&m);
        assert!(e.iter().all(|&id| m.params().name(id).starts_with("embed.")));
        assert_eq!(e.len() + m.llm_ids().len(), m.params().len());
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let mut m = Model::<f32>::new(tiny()).unwrap();
        let before = m.params().hash_all();
        let t = make_desk_teachers(&tiny(), 0).unwrap();
        let r = run_distillation(&plan(StageId::Distill, 0), &t, &mut m, DistillData::random()).unwrap();
        assert!(r.steps.is_empty());
        assert_eq!(m.params().hash_all(), before);
    }

    #[test]
    fn distillation_and_alignment_freeze_backbone_and_teachers() {
        let cfg = tiny();
        let mut m = Model::<f32>::new(cfg.clone()).unwrap();
        let t = make_desk_teachers(&cfg, 0).unwrap();
        let (llm, teach, emb) = (m.llm_hash(), t.hash(), m.params().hash_of(&m.embedding_ids()));
        let r = run_distillation(&plan(StageId::Distill, 3), &t, &mut m, DistillData::random()).unwrap();
        assert_eq!(r.steps.len(), 3);
        assert!(r.losses().iter().all(|l| (-2.0..=2.0).contains(l)));
        let data = crate::data::encode_all(&shapes(4), &cfg).unwrap();
        run_alignment(&plan(StageId::Align, 3), &mut m, &data).unwrap();
        assert_eq!(m.llm_hash(), llm);
        assert_eq!(t.hash(), teach);
        assert_ne!(m.params().hash_of(&m.embedding_ids()), emb);
        let before = m.llm_hash();
        run_instruction_tuning(&plan(StageId::Instruct, 2), &mut m, &data).unwrap();
        assert_ne!(m.llm_hash(), before);
    }

    #[test]
    fn wrong_plan_is_rejected() {
        let mut m = Model::<f32>::new(tiny()).unwrap();
        let data = crate::data::encode_all(&shapes(2), &tiny()).unwrap();
        assert!(matches!(run_alignment(&plan(StageId::Instruct, 1), &mut m, &data), Err(Error::Usage(_))));
    }

    #[test]
    fn same_seed_same_losses() {
        let cfg = tiny();
        let t = make_desk_teachers(&cfg, 0).unwrap();
        let samples = shapes(6);
        let run = || {
            let mut m = Model::<f32>::new(cfg.clone()).unwrap();
            let data = DistillData {
                images: Some(&samples),
                text: DistillText::Paired,
            };
            run_distillation(&plan(StageId::Distill, 3), &t, &mut m, data).unwrap().losses()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn skipped_samples_are_counted() {
        let cfg = tiny();
        let mut m = Model::<f32>::new(cfg.clone()).unwrap();
        let mut seq = shapes(1)[0].to_sequence(&cfg).unwrap();
        seq.loss_mask.iter_mut().for_each(|b| *b = false);
        let r = run_alignment(&plan(StageId::Align, 2), &mut m, &[seq]).unwrap();
        assert_eq!(r.skipped_samples, 4);
        assert!(r.steps.is_empty());
    }

    #[test]
    fn warm_start_reduces_text_loss() {
        let cfg = tiny();
        let mut m = Model::<f32>::new(cfg.clone()).unwrap();
        let t = make_desk_teachers(&cfg, 0).unwrap();
        let texts: Vec<_> = shapes(16).iter().map(|s| s.text_only().to_sequence(&cfg).unwrap()).collect();
        let p = StagePlan {
            steps: 60,
            batch_size: 4,
            peak_lr: 3e-3,
            ..StagePlan::desk(StageId::Backbone)
        };
        let r = run_backbone_warmstart(&p, &t, &mut m, &texts).unwrap();
        assert!(r.tail_mean(10).unwrap() < r.steps[0].loss * 0.8);
    }
}
