//! Ablation grids over embedding depth, training stages, distillation text and
//! distillation sample count, evaluated on held-out shape captions.
//!
//! Every cell starts from the same warm-started backbone, runs its stages with a
//! fixed budget, and reports held-out loss and exact-match caption accuracy.
//! Results are rewritten as CSV, SVG and JSON after every cell so a failing grid
//! leaves the completed cells on disk.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::svg;
use crate::config::{canonical_json, sha256_hex, ModelConfig};
use crate::data::{encode_all, generate_samples, DatasetKind, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::input::TokenSequence;
use crate::model::Model;
use crate::store::{save_checkpoint, write_atomic, write_json_atomic};
use crate::train::eval::{answer_accuracy, eval_lm_loss};
use crate::train::{
    make_teachers, run_alignment, run_backbone_warmstart, run_distillation, run_instruction_tuning, DistillData,
    DistillText, StageId, StagePlan, TeacherBundle, TeacherKind, Warmup,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Depth,
    Stages,
    TextData,
    DistillSamples,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Depth => "depth",
            AblationAxis::Stages => "stages",
            AblationAxis::TextData => "text-data",
            AblationAxis::DistillSamples => "distill-samples",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSet {
    pub distill: bool,
    pub align: bool,
    pub instruct: bool,
}

impl StageSet {
    pub const ALL: StageSet = StageSet {
        distill: true,
        align: true,
        instruct: true,
    };
    pub const DISTILL_ALIGN: StageSet = StageSet {
        distill: true,
        align: true,
        instruct: false,
    };

    pub fn label(self) -> String {
        let names: Vec<&str> = [(self.distill, "distill"), (self.align, "align"), (self.instruct, "instruct")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

/// Where distillation images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillImages {
    Noise,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub label: String,
    pub embed_depth: usize,
    pub stages: StageSet,
    pub distill_images: DistillImages,
    pub distill_text: DistillText,
    pub distill_samples: usize,
    /// Set when the cell stands in for a larger published setting.
    pub substitutes_for: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationBudget {
    pub backbone_steps: usize,
    pub distill_samples: usize,
    pub align_steps: usize,
    pub instruct_steps: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub distill_lr: f64,
    pub align_lr: f64,
    pub instruct_lr: f64,
}

impl Default for AblationBudget {
    fn default() -> Self {
        AblationBudget {
            backbone_steps: 400,
            distill_samples: 2400,
            align_steps: 300,
            instruct_steps: 150,
            batch_size: 8,
            backbone_lr: 2e-3,
            distill_lr: 1e-3,
            align_lr: 1e-3,
            instruct_lr: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSetup {
    pub base: ModelConfig,
    pub budget: AblationBudget,
    pub seed: u64,
    pub teacher: TeacherKind,
    pub train_count: usize,
    pub eval_count: usize,
    pub image_size: usize,
    pub answer_max_new: usize,
}

impl AblationSetup {
    pub fn desk(seed: u64) -> Self {
        AblationSetup {
            base: ModelConfig::desk(),
            budget: AblationBudget::default(),
            seed,
            teacher: TeacherKind::Transformer,
            train_count: 512,
            eval_count: 64,
            image_size: 32,
            answer_max_new: 48,
        }
    }
}

/// Published axis values each desk cell stands in for.
const PAPER_DISTILL_SAMPLES: [&str; 3] = ["10k", "50k", "250k"];

pub fn grid(axis: AblationAxis, setup: &AblationSetup) -> Vec<CellSpec> {
    let d = setup.base.embed_depth;
    let n = setup.budget.distill_samples;
    let cell = |label: String, embed_depth, stages, images, text, samples| CellSpec {
        label,
        embed_depth,
        stages,
        distill_images: images,
        distill_text: text,
        distill_samples: samples,
        substitutes_for: None,
    };
    match axis {
        AblationAxis::Depth => [0, 2, 4]
            .into_iter()
            .map(|k| cell(format!("depth-{k}"), k, StageSet::DISTILL_ALIGN, DistillImages::Noise, DistillText::Random, n))
            .collect(),
        AblationAxis::Stages => [
            StageSet { distill: false, ..StageSet::ALL },
            StageSet { align: false, ..StageSet::ALL },
            StageSet { instruct: false, ..StageSet::ALL },
            StageSet::ALL,
        ]
        .into_iter()
        .map(|s| cell(s.label(), d, s, DistillImages::Noise, DistillText::Random, n))
        .collect(),
        AblationAxis::TextData => [DistillText::Random, DistillText::Paired]
            .into_iter()
            .map(|t| {
                let label = match t {
                    DistillText::Random => "random-text",
                    DistillText::Paired => "paired-text",
                };
                cell(label.into(), d, StageSet::DISTILL_ALIGN, DistillImages::Dataset, t, n)
            })
            .collect(),
        AblationAxis::DistillSamples => [1, 5, 25]
            .into_iter()
            .zip(PAPER_DISTILL_SAMPLES)
            .map(|(mult, paper)| CellSpec {
                substitutes_for: Some(format!("{paper} distillation samples")),
                ..cell(
                    format!("{}-samples", n * mult),
                    d,
                    StageSet::DISTILL_ALIGN,
                    DistillImages::Noise,
                    DistillText::Random,
                    n * mult,
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub axis: AblationAxis,
    pub spec: CellSpec,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub eval_loss: f64,
    pub accuracy: f64,
    pub final_losses: Vec<(StageId, f64)>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub setup: AblationSetup,
    pub backbone_hash: String,
    pub cells: Vec<AblationCell>,
    pub complete: bool,
    pub error: Option<String>,
}

impl AblationResult {
    pub fn cell(&self, label: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.spec.label == label)
    }
}

/// Flat CSV row.
#[derive(Serialize)]
struct Row<'a> {
    axis: &'a str,
    label: &'a str,
    embed_depth: usize,
    stages: String,
    distill_images: &'a str,
    distill_text: &'a str,
    distill_samples: usize,
    substitutes_for: &'a str,
    seed: u64,
    config_hash: &'a str,
    checkpoint_hash: &'a str,
    eval_loss: f64,
    accuracy: f64,
    wall_seconds: f64,
}

pub struct AblationFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub json: PathBuf,
}

pub fn output_files(out_dir: &Path, axis: AblationAxis) -> AblationFiles {
    let stem = format!("ablation-{}", axis.name());
    AblationFiles {
        csv: out_dir.join(format!("{stem}.csv")),
        svg: out_dir.join(format!("{stem}.svg")),
        json: out_dir.join(format!("{stem}.json")),
    }
}

pub fn write_outputs(result: &AblationResult, out_dir: &Path) -> Result<AblationFiles> {
    let files = output_files(out_dir, result.axis);
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &result.cells {
        w.serialize(Row {
            axis: c.axis.name(),
            label: &c.spec.label,
            embed_depth: c.spec.embed_depth,
            stages: c.spec.stages.label(),
            distill_images: match c.spec.distill_images {
                DistillImages::Noise => "noise",
                DistillImages::Dataset => "dataset",
            },
            distill_text: match c.spec.distill_text {
                DistillText::Random => "random",
                DistillText::Paired => "paired",
            },
            distill_samples: c.spec.distill_samples,
            substitutes_for: c.spec.substitutes_for.as_deref().unwrap_or(""),
            seed: c.seed,
            config_hash: &c.config_hash,
            checkpoint_hash: &c.checkpoint_hash,
            eval_loss: c.eval_loss,
            accuracy: c.accuracy,
            wall_seconds: c.wall_seconds,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))?;
    write_atomic(&files.csv, &bytes)?;
    let labels: Vec<String> = result.cells.iter().map(|c| c.spec.label.clone()).collect();
    let losses: Vec<f64> = result.cells.iter().map(|c| c.eval_loss).collect();
    let title = format!("held-out caption loss by {} (seed {})", result.axis.name(), result.setup.seed);
    let chart = match result.axis {
        AblationAxis::DistillSamples => svg::line_chart(&title, "distillation samples", "loss", &labels, &losses),
        _ => svg::bar_chart(&title, result.axis.name(), "loss", &labels, &losses),
    };
    write_atomic(&files.svg, chart.as_bytes())?;
    write_json_atomic(&files.json, result)?;
    Ok(files)
}

struct Data {
    align: Vec<TokenSequence>,
    instruct: Vec<TokenSequence>,
    eval_seqs: Vec<TokenSequence>,
    eval_samples: Vec<Sample>,
    distill_pool: Vec<Sample>,
    backbone: Vec<TokenSequence>,
}

fn build_data(setup: &AblationSetup) -> Result<Data> {
    let spec = |kind, count, salt: u64| DatasetSpec {
        kind,
        count,
        seed: setup.seed.wrapping_mul(1_000_003).wrapping_add(salt),
        image_size: setup.image_size,
    };
    let captions = generate_samples(&spec(DatasetKind::ShapesCaption, setup.train_count, 1))?;
    let qa = generate_samples(&spec(DatasetKind::ShapesQa, setup.train_count, 2))?;
    let eval_samples = generate_samples(&spec(DatasetKind::ShapesCaption, setup.eval_count, 3))?;
    let cfg = &setup.base;
    let mut instruct_samples = captions.clone();
    instruct_samples.extend(qa.iter().cloned());
    let mut backbone = instruct_samples.clone();
    backbone.extend(instruct_samples.iter().map(Sample::text_only));
    Ok(Data {
        align: encode_all(&captions, cfg)?,
        instruct: encode_all(&instruct_samples, cfg)?,
        eval_seqs: encode_all(&eval_samples, cfg)?,
        eval_samples,
        distill_pool: captions,
        backbone: encode_all(&backbone, cfg)?,
    })
}

fn short_plan(stage: StageId, steps: usize, batch: usize, lr: f64, seed: u64) -> StagePlan {
    let base = StagePlan::desk(stage);
    let warmup = match base.warmup {
        Warmup::Steps(w) => Warmup::Steps(w.min(steps / 10)),
        r => r,
    };
    StagePlan {
        steps,
        batch_size: batch,
        peak_lr: lr,
        warmup,
        seed,
        ..base
    }
}

/// Backbone shared by all cells: fresh parameters warm-started on teacher features.
fn warm_backbone(setup: &AblationSetup, teachers: &TeacherBundle<f32>, data: &Data) -> Result<Model<f32>> {
    let mut m = Model::<f32>::new(setup.base.clone())?;
    let b = &setup.budget;
    let plan = short_plan(StageId::Backbone, b.backbone_steps, b.batch_size, b.backbone_lr, setup.seed);
    run_backbone_warmstart(&plan, teachers, &mut m, &data.backbone)?;
    Ok(m)
}

fn run_cell(
    axis: AblationAxis,
    spec: &CellSpec,
    setup: &AblationSetup,
    teachers: &TeacherBundle<f32>,
    backbone: &Model<f32>,
    data: &Data,
    out_dir: &Path,
) -> Result<AblationCell> {
    let start = Instant::now();
    let cfg = ModelConfig {
        embed_depth: spec.embed_depth,
        ..setup.base.clone()
    };
    let mut m = Model::<f32>::new(cfg.clone())?;
    for id in m.llm_ids() {
        let name = m.params().name(id).to_string();
        let t = backbone
            .params()
            .by_name(&name)
            .ok_or_else(|| Error::Config(format!("backbone lacks {name}")))?;
        *m.params_mut().get_mut(id) = t.clone();
    }
    let b = &setup.budget;
    let seed = setup.seed;
    let mut final_losses = Vec::new();
    let mut note = |stage, r: crate::train::TrainReport| {
        if let Some(l) = r.tail_mean(10) {
            final_losses.push((stage, l));
        }
    };
    if spec.stages.distill {
        let steps = spec.distill_samples.div_ceil(b.batch_size);
        let plan = short_plan(StageId::Distill, steps, b.batch_size, b.distill_lr, seed);
        let images = match spec.distill_images {
            DistillImages::Noise => None,
            DistillImages::Dataset => Some(data.distill_pool.as_slice()),
        };
        let d = DistillData {
            images,
            text: spec.distill_text,
        };
        note(StageId::Distill, run_distillation(&plan, teachers, &mut m, d)?);
    }
    if spec.stages.align {
        let plan = short_plan(StageId::Align, b.align_steps, b.batch_size, b.align_lr, seed);
        note(StageId::Align, run_alignment(&plan, &mut m, &data.align)?);
    }
    if spec.stages.instruct {
        let plan = short_plan(StageId::Instruct, b.instruct_steps, b.batch_size, b.instruct_lr, seed);
        note(StageId::Instruct, run_instruction_tuning(&plan, &mut m, &data.instruct)?);
    }
    let eval_loss = eval_lm_loss(&m, &data.eval_seqs)?;
    let accuracy = answer_accuracy(&m, &data.eval_samples, setup.answer_max_new)?;
    let checkpoint = out_dir.join("cells").join(format!("{}-{}.ckpt", axis.name(), spec.label));
    let checkpoint_hash = save_checkpoint(&checkpoint, &m)?;
    let config_hash = sha256_hex(canonical_json(&(&cfg, spec, &setup.budget, setup.teacher, seed)).as_bytes());
    Ok(AblationCell {
        axis,
        spec: spec.clone(),
        seed,
        config_hash,
        checkpoint,
        checkpoint_hash,
        eval_loss,
        accuracy,
        final_losses,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every cell of `axis`. On a failing cell the completed cells are written
/// with the error recorded, and the error is returned.
pub fn run_ablation(axis: AblationAxis, setup: &AblationSetup, out_dir: &Path) -> Result<AblationResult> {
    run_cells(axis, &grid(axis, setup), setup, out_dir)
}

pub fn run_cells(axis: AblationAxis, cells: &[CellSpec], setup: &AblationSetup, out_dir: &Path) -> Result<AblationResult> {
    if cells.is_empty() {
        return Err(Error::Usage("ablation grid has no cells".into()));
    }
    for c in cells {
        ModelConfig {
            embed_depth: c.embed_depth,
            ..setup.base.clone()
        }
        .validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let teachers = make_teachers::<f32>(&setup.base, setup.seed, setup.teacher)?;
    let data = build_data(setup)?;
    let backbone = warm_backbone(setup, &teachers, &data)?;
    let mut result = AblationResult {
        axis,
        setup: setup.clone(),
        backbone_hash: backbone.llm_hash(),
        cells: Vec::with_capacity(cells.len()),
        complete: false,
        error: None,
    };
    for spec in cells {
        match run_cell(axis, spec, setup, &teachers, &backbone, &data, out_dir) {
            Ok(cell) => {
                result.cells.push(cell);
                write_outputs(&result, out_dir)?;
            }
            Err(e) => {
                result.error = Some(format!("cell {}: {e}", spec.label));
                write_outputs(&result, out_dir)?;
                return Err(e);
            }
        }
    }
    result.complete = true;
    write_outputs(&result, out_dir)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup() -> AblationSetup {
        AblationSetup {
            base: ModelConfig {
                hidden: 16,
                heads: 2,
                embed_depth: 1,
                llm_depth: 1,
                ..ModelConfig::desk()
            },
            budget: AblationBudget {
                backbone_steps: 2,
                distill_samples: 4,
                align_steps: 2,
                instruct_steps: 2,
                batch_size: 2,
                ..AblationBudget::default()
            },
            seed: 0,
            teacher: TeacherKind::Transformer,
            train_count: 4,
            eval_count: 2,
            image_size: 32,
            answer_max_new: 4,
        }
    }

    #[test]
    fn grids_enumerate_published_rows() {
        let s = AblationSetup::desk(0);
        let depth: Vec<usize> = grid(AblationAxis::Depth, &s).iter().map(|c| c.embed_depth).collect();
        assert_eq!(depth, [0, 2, 4]);
        let stages = grid(AblationAxis::Stages, &s);
        assert_eq!(stages.len(), 4);
        assert_eq!(stages.iter().filter(|c| c.stages == StageSet::ALL).count(), 1);
        for dropped in 0..3 {
            assert!(!stages[dropped].stages.label().contains(["distill", "align", "instruct"][dropped]));
        }
        let samples = grid(AblationAxis::DistillSamples, &s);
        assert!(samples.iter().all(|c| c.substitutes_for.is_some()));
        assert_eq!(samples[2].distill_samples, 25 * samples[0].distill_samples);
        assert_eq!(grid(AblationAxis::TextData, &s).len(), 2);
    }

    #[test]
    fn tiny_grid_writes_traceable_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_ablation(AblationAxis::Stages, &tiny_setup(), dir.path()).unwrap();
        assert!(r.complete);
        assert_eq!(r.cells.len(), 4);
        let files = output_files(dir.path(), AblationAxis::Stages);
        let mut rd = csv::Reader::from_path(&files.csv).unwrap();
        let headers = rd.headers().unwrap().clone();
        for col in ["seed", "config_hash", "checkpoint_hash", "eval_loss"] {
            assert!(headers.iter().any(|h| h == col));
        }
        assert_eq!(rd.records().count(), 4);
        for c in &r.cells {
            let bytes = fs::read(&c.checkpoint).unwrap();
            assert_eq!(sha256_hex(&bytes), c.checkpoint_hash);
        }
        assert!(fs::read_to_string(files.svg).unwrap().starts_with("<svg"));
    }

    #[test]
    fn failing_cell_keeps_partial_results() {
        let dir = tempfile::tempdir().unwrap();
        let setup = tiny_setup();
        let mut cells = grid(AblationAxis::Depth, &setup);
        cells.truncate(1);
        let mut bad = cells[0].clone();
        bad.label = "broken".into();
        bad.distill_images = DistillImages::Noise;
        bad.distill_text = DistillText::Paired;
        cells.push(bad);
        assert!(run_cells(AblationAxis::Depth, &cells, &setup, dir.path()).is_err());
        let text = fs::read_to_string(output_files(dir.path(), AblationAxis::Depth).json).unwrap();
        let partial: AblationResult = serde_json::from_str(&text).unwrap();
        assert_eq!(partial.cells.len(), 1);
        assert!(!partial.complete && partial.error.unwrap().contains("broken"));
    }
}
