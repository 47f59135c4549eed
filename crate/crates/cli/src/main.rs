//! `hovle` command-line entry point.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hovle_core::analysis::ablation::{output_files, AblationAxis, AblationSetup};
use hovle_core::analysis::svg::heatmap;
use hovle_core::analysis::{bench_latency, bench_prompt, density_profile, run_ablation, BenchSpec};
use hovle_core::data::{encode_all, generate_samples, load_jsonl_dir, make_dataset, DatasetKind, DatasetSpec, Sample};
use hovle_core::input::sequence::{assemble_prompt, encode_image};
use hovle_core::input::tokenizer::{bytes_to_text, detokenize, text_to_bytes, tokenize, EOS};
use hovle_core::input::RawImage;
use hovle_core::model::{capture_attention, generate, GenerateOptions, Model, Stack};
use hovle_core::store::{
    encode_checkpoint, inspect_checkpoint, load_checkpoint, load_checkpoint_into, save_checkpoint, write_atomic,
    write_json_atomic, RunConfig, RunManifest,
};
use hovle_core::train::{
    make_teachers, run_alignment, run_backbone_warmstart, run_distillation, run_instruction_tuning, DistillData,
    DistillText, Preset, StageId, StagePlan, TrainReport,
};
use hovle_core::{Error, ModelConfig};

#[derive(Parser)]
#[command(name = "hovle", version, about = "Monolithic vision-language model toolkit at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to start from or to inspect.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    stage_preset: PresetArg,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Directory holding samples.jsonl and images; generated from the config otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the plan's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the plan's batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Override the plan's peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    RandomDistill,
    ShapesCaption,
    ShapesQa,
}

#[derive(Clone, Copy, ValueEnum)]
enum StackArg {
    Embed,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheArg {
    On,
    Off,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Depth,
    Stages,
    TextData,
    DistillSamples,
}

#[derive(Subcommand)]
enum Command {
    /// Distill teacher features into the embedding module.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Use the dataset's paired text instead of random ids (needs --data or a config dataset).
        #[arg(long)]
        paired: bool,
        /// Warm-start the backbone on teacher features for this many steps first.
        #[arg(long, default_value_t = 0)]
        backbone_steps: usize,
    },
    /// Train the embedding module through the frozen backbone.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train every parameter on instruction data.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Greedy generation from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        /// PPM (P6) image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long)]
        no_cache: bool,
    },
    /// Export attention maps and text-to-image density.
    AttnProbe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "describe the image.")]
        prompt: String,
        #[arg(long, value_enum, default_value_t = StackArg::Llm)]
        stack: StackArg,
        /// Comma-separated layer indices; all layers when absent.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        /// Density threshold; the uniform share when absent.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Time to first token and throughput, with and without the cache.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 256)]
        text_tokens: usize,
        #[arg(long, default_value_t = 120)]
        max_new: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, value_enum, default_value_t = CacheArg::Both)]
        cache: CacheArg,
    },
    /// Run one ablation axis and write CSV, SVG and JSON.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        backbone_steps: Option<usize>,
        #[arg(long)]
        distill_samples: Option<usize>,
        #[arg(long)]
        align_steps: Option<usize>,
        #[arg(long)]
        instruct_steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        eval_count: Option<usize>,
    },
    /// Write a synthetic dataset as PPM images and JSONL.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Print a checkpoint's config and tensor manifest.
    InspectCkpt {
        #[command(flatten)]
        common: Common,
    },
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn need_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| usage("--out DIR is required for this command"))
}

fn need_ckpt(c: &Common) -> Result<&Path> {
    c.ckpt.as_deref().ok_or_else(|| usage("--ckpt PATH is required for this command"))
}

fn run_config(c: &Common) -> Result<RunConfig> {
    match &c.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::desk()),
    }
}

/// The starting model: the checkpoint if given (checked against the config when one
/// is given), else fresh parameters seeded by `--seed`.
fn start_model(c: &Common, rc: &RunConfig) -> Result<Model<f32>> {
    match (&c.ckpt, &c.config) {
        (Some(p), Some(_)) => Ok(load_checkpoint_into(p, &rc.model)?),
        (Some(p), None) => Ok(load_checkpoint(p)?),
        (None, _) => Ok(Model::new(ModelConfig {
            seed: c.seed,
            ..rc.model.clone()
        })?),
    }
}

fn load_model(c: &Common) -> Result<Model<f32>> {
    Ok(load_checkpoint(need_ckpt(c)?)?)
}

fn samples(c: &Common, rc: &RunConfig, t: &TrainArgs, default_kind: DatasetKind) -> Result<(Vec<Sample>, Vec<PathBuf>)> {
    if let Some(dir) = &t.data {
        return Ok((load_jsonl_dir(dir)?, vec![dir.clone()]));
    }
    let spec = rc.data.clone().unwrap_or(DatasetSpec {
        kind: default_kind,
        count: 512,
        seed: c.seed,
        image_size: 32,
    });
    Ok((generate_samples(&spec)?, Vec::new()))
}

fn plan_for(c: &Common, rc: &RunConfig, stage: StageId, t: &TrainArgs) -> Result<StagePlan> {
    let mut plan = rc.plan(stage, c.stage_preset.into())?;
    plan.seed = c.seed;
    if let Some(s) = t.steps {
        plan.steps = s;
        if plan.warmup_steps() > s {
            plan.warmup = hovle_core::train::Warmup::Steps(s / 10);
        }
    }
    if let Some(b) = t.batch {
        plan.batch_size = b;
    }
    if let Some(lr) = t.lr {
        plan.peak_lr = lr;
    }
    plan.validate()?;
    Ok(plan)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    run: &'a RunConfig,
    plans: &'a [StagePlan],
}

fn finish_training(
    command: &str,
    out: &Path,
    rc: &RunConfig,
    seed: u64,
    plans: &[StagePlan],
    reports: &[TrainReport],
    model: &Model<f32>,
    inputs: Vec<PathBuf>,
) -> Result<()> {
    let mut manifest = RunManifest::begin(command, &RunRecord { run: rc, plans }, seed);
    let ckpt = out.join("model.ckpt");
    let hash = save_checkpoint(&ckpt, model)?;
    let mut jsonl = String::new();
    let mut reports = reports.to_vec();
    for r in &mut reports {
        r.checkpoint = Some(ckpt.display().to_string());
        jsonl.push_str(&r.to_jsonl());
        manifest.stages.push(r.stage.name().to_string());
    }
    let log = out.join("train.jsonl");
    write_atomic(&log, jsonl.as_bytes())?;
    let report = out.join("report.json");
    write_json_atomic(&report, &reports)?;
    manifest.inputs = inputs;
    manifest.outputs = vec![ckpt.clone(), log, report];
    let mpath = manifest.finish(out)?;
    for r in &reports {
        let last = r.steps.last().map_or(f64::NAN, |s| s.loss);
        println!(
            "{}: {} steps, final loss {last:.4}, {:.1}s, {} skipped",
            r.stage.name(),
            r.steps.len(),
            r.wall_seconds,
            r.skipped_samples
        );
    }
    println!("checkpoint {} sha256 {hash}", ckpt.display());
    println!("manifest {}", mpath.display());
    Ok(())
}

fn cmd_distill(c: &Common, t: &TrainArgs, paired: bool, backbone_steps: usize) -> Result<()> {
    let out = need_out(c)?;
    let rc = run_config(c)?;
    let mut model = start_model(c, &rc)?;
    let plan = plan_for(c, &rc, StageId::Distill, t)?;
    let teachers = make_teachers::<f32>(model.config(), c.seed, rc.teacher)?;
    let (data, inputs) = if paired || t.data.is_some() {
        samples(c, &rc, t, DatasetKind::ShapesCaption)?
    } else {
        (Vec::new(), Vec::new())
    };
    let mut plans = Vec::new();
    let mut reports = Vec::new();
    if backbone_steps > 0 {
        let source = if data.is_empty() {
            generate_samples(&DatasetSpec {
                kind: DatasetKind::ShapesCaption,
                count: 512,
                seed: c.seed,
                image_size: 32,
            })?
        } else {
            data.clone()
        };
        let mut seqs = encode_all(&source, model.config())?;
        let text: Vec<Sample> = source.iter().map(Sample::text_only).collect();
        seqs.extend(encode_all(&text, model.config())?);
        let bplan = StagePlan {
            steps: backbone_steps,
            seed: c.seed,
            ..StagePlan::desk(StageId::Backbone)
        };
        let bplan = StagePlan {
            warmup: hovle_core::train::Warmup::Steps(bplan.warmup_steps().min(backbone_steps / 10)),
            ..bplan
        };
        reports.push(run_backbone_warmstart(&bplan, &teachers, &mut model, &seqs)?);
        plans.push(bplan);
    }
    let dd = DistillData {
        images: if data.is_empty() { None } else { Some(&data) },
        text: if paired { DistillText::Paired } else { DistillText::Random },
    };
    reports.push(run_distillation(&plan, &teachers, &mut model, dd)?);
    plans.push(plan);
    finish_training("distill", out, &rc, c.seed, &plans, &reports, &model, inputs)
}

fn cmd_lm_stage(c: &Common, t: &TrainArgs, stage: StageId) -> Result<()> {
    let out = need_out(c)?;
    let rc = run_config(c)?;
    let mut model = start_model(c, &rc)?;
    let plan = plan_for(c, &rc, stage, t)?;
    let kind = if stage == StageId::Align {
        DatasetKind::ShapesCaption
    } else {
        DatasetKind::ShapesQa
    };
    let (data, mut inputs) = samples(c, &rc, t, kind)?;
    let seqs = encode_all(&data, model.config())?;
    let report = match stage {
        StageId::Align => run_alignment(&plan, &mut model, &seqs)?,
        _ => run_instruction_tuning(&plan, &mut model, &seqs)?,
    };
    if let Some(p) = &c.ckpt {
        inputs.push(p.clone());
    }
    let name = if stage == StageId::Align { "align" } else { "finetune" };
    finish_training(name, out, &rc, c.seed, &[plan], &[report], &model, inputs)
}

fn prompt_sequence(
    model: &Model<f32>,
    image: Option<&Path>,
    prompt: &str,
) -> Result<hovle_core::input::TokenSequence> {
    let patches = match image {
        Some(p) => Some(encode_image(&RawImage::read_ppm(p)?, model.config())?),
        None => None,
    };
    Ok(assemble_prompt(patches, &tokenize(&text_to_bytes(prompt))))
}

#[derive(Serialize)]
struct GenerationOut {
    prompt: String,
    response: String,
    ids: Vec<u32>,
    token_seconds: Vec<f64>,
}

fn cmd_generate(c: &Common, image: Option<&Path>, prompt: &str, max_new: usize, no_cache: bool) -> Result<()> {
    let model = load_model(c)?;
    let seq = prompt_sequence(&model, image, prompt)?;
    let g = generate(
        &model,
        &seq,
        GenerateOptions {
            use_cache: !no_cache,
            ..GenerateOptions::greedy(max_new)
        },
    )?;
    let end = g.ids.iter().position(|&id| id == EOS).unwrap_or(g.ids.len());
    let response = bytes_to_text(&detokenize(&g.ids[..end]));
    println!("{response}");
    if let Some(out) = &c.out {
        let rec = GenerationOut {
            prompt: prompt.to_string(),
            response,
            ids: g.ids.clone(),
            token_seconds: g.token_times.iter().map(|d| d.as_secs_f64()).collect(),
        };
        let path = out.join("generation.json");
        write_json_atomic(&path, &rec)?;
        let mut m = RunManifest::begin("generate", &(model.config(), prompt, max_new, no_cache), c.seed);
        m.inputs = image.into_iter().map(Path::to_path_buf).chain(c.ckpt.clone()).collect();
        m.outputs = vec![path];
        m.finish(out)?;
    }
    Ok(())
}

fn cmd_attn_probe(c: &Common, image: &Path, prompt: &str, stack: StackArg, layers: &[usize], tau: Option<f64>) -> Result<()> {
    let out = need_out(c)?;
    let model = load_model(c)?;
    let seq = prompt_sequence(&model, Some(image), prompt)?;
    let stack = match stack {
        StackArg::Embed => Stack::Embed,
        StackArg::Llm => Stack::Llm,
    };
    let depth = match stack {
        Stack::Embed => model.config().embed_depth,
        Stack::Llm => model.config().llm_depth,
    };
    let layers: Vec<usize> = if layers.is_empty() { (0..depth).collect() } else { layers.to_vec() };
    if layers.is_empty() {
        bail!(usage("the selected stack has no layers"));
    }
    let records = capture_attention(&model, &seq, stack, &layers)?;
    let profile = density_profile(&model, &seq, stack, &layers, tau)?;
    let mut outputs = Vec::new();
    let heads = model.config().heads;
    for &l in &layers {
        let recs: Vec<_> = records.iter().filter(|r| r.layer == l).collect();
        let n = recs[0].n;
        let mean: Vec<f64> = (0..n * n).map(|i| recs.iter().map(|r| r.weights[i]).sum::<f64>() / heads as f64).collect();
        let stem = format!("attention-{}-layer{l}", if stack == Stack::Embed { "embed" } else { "llm" });
        let mut w = csv::Writer::from_writer(Vec::new());
        for q in 0..n {
            w.write_record(mean[q * n..(q + 1) * n].iter().map(|v| format!("{v:.6e}")))?;
        }
        let csv_path = out.join(format!("{stem}.csv"));
        write_atomic(&csv_path, &w.into_inner().context("csv buffer")?)?;
        let svg_path = out.join(format!("{stem}.svg"));
        write_atomic(&svg_path, heatmap(&format!("{stem} (head mean)"), n, &mean).as_bytes())?;
        outputs.extend([csv_path, svg_path]);
    }
    let dpath = out.join("density.json");
    write_json_atomic(&dpath, &profile)?;
    outputs.push(dpath);
    for (l, d) in profile.layers.iter().zip(&profile.per_layer) {
        println!("layer {l}: text-to-image density {d:.4}");
    }
    let mut m = RunManifest::begin("attn-probe", &(model.config(), prompt, &layers, tau), c.seed);
    m.inputs = vec![image.to_path_buf(), need_ckpt(c)?.to_path_buf()];
    m.outputs = outputs;
    m.finish(out)?;
    Ok(())
}

fn cmd_bench(c: &Common, text_tokens: usize, max_new: usize, runs: usize, warmup: usize, cache: CacheArg) -> Result<()> {
    let model = match &c.ckpt {
        Some(p) => load_checkpoint(p)?,
        None => start_model(c, &run_config(c)?)?,
    };
    let prompt = bench_prompt(&model, text_tokens, c.seed)?;
    let modes: &[bool] = match cache {
        CacheArg::On => &[true],
        CacheArg::Off => &[false],
        CacheArg::Both => &[true, false],
    };
    let mut reports = Vec::new();
    for &use_cache in modes {
        let spec = BenchSpec {
            text_tokens,
            max_new,
            use_cache,
            runs,
            warmup,
            seed: c.seed,
        };
        let r = bench_latency(&model, &prompt, spec)?;
        println!(
            "cache {}: prompt {} tokens, ttft {:.4}s, tps {:.1}, flops {}",
            if use_cache { "on" } else { "off" },
            r.prompt_tokens,
            r.ttft_seconds,
            r.tps,
            r.flops_total
        );
        reports.push(r);
    }
    if reports.len() == 2 && reports[0].ids != reports[1].ids {
        bail!(Error::Benchmark("cache on and off produced different tokens".into()));
    }
    if let Some(out) = &c.out {
        let path = out.join("bench.json");
        write_json_atomic(&path, &reports)?;
        let mut m = RunManifest::begin("bench", &(model.config(), text_tokens, max_new, runs), c.seed);
        m.inputs = c.ckpt.iter().cloned().collect();
        m.outputs = vec![path];
        m.finish(out)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    c: &Common,
    axis: AxisArg,
    backbone_steps: Option<usize>,
    distill_samples: Option<usize>,
    align_steps: Option<usize>,
    instruct_steps: Option<usize>,
    batch: Option<usize>,
    train_count: Option<usize>,
    eval_count: Option<usize>,
) -> Result<()> {
    let out = need_out(c)?;
    let rc = run_config(c)?;
    let mut setup = AblationSetup::desk(c.seed);
    setup.base = rc.model.clone();
    setup.teacher = rc.teacher;
    let b = &mut setup.budget;
    b.backbone_steps = backbone_steps.unwrap_or(b.backbone_steps);
    b.distill_samples = distill_samples.unwrap_or(b.distill_samples);
    b.align_steps = align_steps.unwrap_or(b.align_steps);
    b.instruct_steps = instruct_steps.unwrap_or(b.instruct_steps);
    b.batch_size = batch.unwrap_or(b.batch_size);
    setup.train_count = train_count.unwrap_or(setup.train_count);
    setup.eval_count = eval_count.unwrap_or(setup.eval_count);
    let axis = match axis {
        AxisArg::Depth => AblationAxis::Depth,
        AxisArg::Stages => AblationAxis::Stages,
        AxisArg::TextData => AblationAxis::TextData,
        AxisArg::DistillSamples => AblationAxis::DistillSamples,
    };
    let mut m = RunManifest::begin("ablate", &setup, c.seed);
    m.stages = vec![axis.name().to_string()];
    let result = run_ablation(axis, &setup, out);
    let files = output_files(out, axis);
    m.outputs = vec![files.csv, files.svg, files.json];
    m.finish(out)?;
    let result = result?;
    for cell in &result.cells {
        println!(
            "{:28} loss {:.4} accuracy {:.3} ckpt {}",
            cell.spec.label,
            cell.eval_loss,
            cell.accuracy,
            &cell.checkpoint_hash[..12]
        );
    }
    Ok(())
}

fn cmd_make_data(c: &Common, kind: KindArg, count: usize, image_size: usize) -> Result<()> {
    let out = need_out(c)?;
    let spec = DatasetSpec {
        kind: match kind {
            KindArg::RandomDistill => DatasetKind::RandomDistill,
            KindArg::ShapesCaption => DatasetKind::ShapesCaption,
            KindArg::ShapesQa => DatasetKind::ShapesQa,
        },
        count,
        seed: c.seed,
        image_size,
    };
    let files = make_dataset(&spec, out)?;
    println!("wrote {} files under {}", files.len(), out.display());
    let mut m = RunManifest::begin("make-data", &spec, c.seed);
    m.outputs = files;
    m.finish(out)?;
    Ok(())
}

#[derive(Serialize)]
struct Inspection {
    #[serde(flatten)]
    info: hovle_core::store::CheckpointInfo,
    parameters: usize,
    round_trip: bool,
}

fn cmd_inspect(c: &Common) -> Result<()> {
    let path = need_ckpt(c)?;
    let info = inspect_checkpoint(path)?;
    let model: Model<f32> = load_checkpoint(path)?;
    let original = std::fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let round_trip = encode_checkpoint(&model)? == original;
    let rec = Inspection {
        parameters: model.params().numel(),
        info,
        round_trip,
    };
    println!("{}", serde_json::to_string_pretty(&rec)?);
    if !round_trip {
        bail!(Error::Data("checkpoint does not re-encode to identical bytes".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Distill {
            common,
            train,
            paired,
            backbone_steps,
        } => cmd_distill(&common, &train, paired, backbone_steps),
        Command::Align { common, train } => cmd_lm_stage(&common, &train, StageId::Align),
        Command::Finetune { common, train } => cmd_lm_stage(&common, &train, StageId::Instruct),
        Command::Generate {
            common,
            image,
            prompt,
            max_new,
            no_cache,
        } => cmd_generate(&common, image.as_deref(), &prompt, max_new, no_cache),
        Command::AttnProbe {
            common,
            image,
            prompt,
            stack,
            layers,
            tau,
        } => cmd_attn_probe(&common, &image, &prompt, stack, &layers, tau),
        Command::Bench {
            common,
            text_tokens,
            max_new,
            runs,
            warmup,
            cache,
        } => cmd_bench(&common, text_tokens, max_new, runs, warmup, cache),
        Command::Ablate {
            common,
            axis,
            backbone_steps,
            distill_samples,
            align_steps,
            instruct_steps,
            batch,
            train_count,
            eval_count,
        } => cmd_ablate(
            &common,
            axis,
            backbone_steps,
            distill_samples,
            align_steps,
            instruct_steps,
            batch,
            train_count,
            eval_count,
        ),
        Command::MakeData {
            common,
            kind,
            count,
            image_size,
        } => cmd_make_data(&common, kind, count, image_size),
        Command::InspectCkpt { common } => cmd_inspect(&common),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(Error::Usage(_)) | Some(Error::Config(_))
        )
    });
    if usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
