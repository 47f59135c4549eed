use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hovle_core::analysis::density_profile;
use hovle_core::data::{encode_all, generate_samples, DatasetKind, DatasetSpec};
use hovle_core::input::sequence::{assemble_prompt, assemble_sample, encode_image, random_distill_sample};
use hovle_core::input::tokenizer::BYTE_VOCAB;
use hovle_core::input::{pixel_shuffle, pixel_unshuffle, Modality, RawImage};
use hovle_core::model::{generate, GenerateOptions, Model, Session, Stack};
use hovle_core::store::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use hovle_core::tensor::Tensor;
use hovle_core::train::{
    distill_objective, make_desk_teachers, run_alignment, run_distillation, run_instruction_tuning, DistillData,
    StageId, StagePlan, Warmup,
};
use hovle_core::ModelConfig;

fn small() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        embed_depth: 2,
        llm_depth: 2,
        ..ModelConfig::desk()
    }
}

fn noise(seed: u64, w: usize, h: usize) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0u8; w * h * 3];
    rng.fill(px.as_mut_slice());
    RawImage::new(w, h, px).unwrap()
}

fn quick(stage: StageId, steps: usize) -> StagePlan {
    StagePlan {
        steps,
        batch_size: 2,
        warmup: Warmup::Steps(0),
        ..StagePlan::desk(stage)
    }
}

#[test]
fn three_stages_then_reload_generates_identically() {
    let cfg = small();
    let teachers = make_desk_teachers::<f32>(&cfg, 0).unwrap();
    let mut model = Model::<f32>::new(cfg.clone()).unwrap();
    let samples = generate_samples(&DatasetSpec {
        kind: DatasetKind::ShapesQa,
        count: 8,
        seed: 3,
        image_size: 32,
    })
    .unwrap();
    let seqs = encode_all(&samples, &cfg).unwrap();

    let d = run_distillation(&quick(StageId::Distill, 5), &teachers, &mut model, DistillData::random()).unwrap();
    let a = run_alignment(&quick(StageId::Align, 4), &mut model, &seqs).unwrap();
    let i = run_instruction_tuning(&quick(StageId::Instruct, 3), &mut model, &seqs).unwrap();
    for (r, n) in [(&d, 5), (&a, 4), (&i, 3)] {
        assert_eq!(r.steps.len(), n);
        assert!(r.losses().iter().all(|l| l.is_finite()));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model).unwrap();
    let back: Model<f32> = load_checkpoint(&path).unwrap();
    let prompt = assemble_prompt(Some(encode_image(&noise(1, 32, 32), &cfg).unwrap()), &[63]);
    let opts = GenerateOptions::greedy(6);
    assert_eq!(generate(&model, &prompt, opts).unwrap().ids, generate(&back, &prompt, opts).unwrap().ids);
}

#[test]
fn distillation_loss_is_bounded_and_lm_loss_nonnegative() {
    let cfg = small();
    let teachers = make_desk_teachers::<f32>(&cfg, 1).unwrap();
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let (_, seq) = random_distill_sample(&mut rng, BYTE_VOCAB, &cfg).unwrap();
        let mut s = Session::inference(&model);
        let t = distill_objective(&mut s, &teachers, &seq).unwrap();
        let v = s.graph.value(t.total).item();
        assert!((-2.0..=2.0).contains(&v), "{v}");
        let mut s = Session::inference(&model);
        let l = s.lm_loss(&seq).unwrap();
        assert!(s.graph.value(l).item() >= 0.0);
    }
}

#[test]
fn embedding_and_backbone_layers_have_equal_sizes() {
    let split = Model::<f32>::new(ModelConfig {
        embed_depth: 3,
        llm_depth: 2,
        ..small()
    })
    .unwrap();
    let flat = Model::<f32>::new(ModelConfig {
        embed_depth: 0,
        llm_depth: 5,
        ..small()
    })
    .unwrap();
    let layer_sizes = |m: &Model<f32>| {
        let mut sizes = Vec::new();
        for (_, name, t) in m.params().iter() {
            if name.contains(".layers.") {
                sizes.push(t.numel());
            }
        }
        sizes.sort();
        sizes
    };
    assert_eq!(layer_sizes(&split), layer_sizes(&flat));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, w in 8usize..80, h in 8usize..80) {
        let cfg = small();
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let seq = assemble_sample(Some(encode_image(&noise(seed, w, h), &cfg).unwrap()), &[1, 2], &[3]).unwrap();
        let run = || {
            let mut s = Session::inference(&model);
            let f = s.forward(&seq).unwrap();
            s.graph.value(f.logits).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn future_text_never_changes_past_logits(seed in 0u64..1000, extra in proptest::collection::vec(0u32..256, 1..10)) {
        let cfg = small();
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let img = encode_image(&noise(seed, 24, 40), &cfg).unwrap();
        let short = assemble_prompt(Some(img.clone()), &[10, 20]);
        let mut q = vec![10, 20];
        q.extend(&extra);
        let long = assemble_prompt(Some(img), &q);
        let logits = |seq| {
            let mut s = Session::inference(&model);
            let f = s.forward(seq).unwrap();
            s.graph.value(f.logits).clone()
        };
        let (a, b) = (logits(&short), logits(&long));
        for r in 0..short.len() {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn kv_cache_matches_recompute(seed in 0u64..1000, q in proptest::collection::vec(0u32..256, 1..16)) {
        let cfg = small();
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let prompt = assemble_prompt(Some(encode_image(&noise(seed, 32, 16), &cfg).unwrap()), &q);
        let on = GenerateOptions { ignore_eos: true, ..GenerateOptions::greedy(8) };
        let off = GenerateOptions { use_cache: false, ..on };
        prop_assert_eq!(generate(&model, &prompt, on).unwrap().ids, generate(&model, &prompt, off).unwrap().ids);
    }

    #[test]
    fn checkpoint_round_trip_is_identity(seed in 0u64..1000, d_e in 0usize..3) {
        let cfg = ModelConfig { seed, embed_depth: d_e, ..small() };
        let model = Model::<f32>::new(cfg).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let back: Model<f32> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.config(), model.config());
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn shuffle_round_trip(tiles in 1usize..4, half in 1usize..4, c in 1usize..5, seed in 0u64..100) {
        let side = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..tiles * side * side * c).map(|_| rng.random()).collect();
        let x = Tensor::new(vec![tiles * side * side, c], data).unwrap();
        let y = pixel_shuffle(&x, tiles, side, 2).unwrap();
        prop_assert_eq!(pixel_unshuffle(&y, tiles, side, 2).unwrap(), x);
    }

    #[test]
    fn densities_lie_in_unit_interval(seed in 0u64..1000, q in proptest::collection::vec(0u32..256, 1..8)) {
        let cfg = small();
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let seq = assemble_sample(Some(encode_image(&noise(seed, 32, 32), &cfg).unwrap()), &q, &[65]).unwrap();
        prop_assert!(seq.loss_mask.iter().zip(&seq.modality).all(|(&m, &k)| !(m && k == Modality::Image)));
        for stack in [Stack::Embed, Stack::Llm] {
            let p = density_profile(&model, &seq, stack, &[0, 1], None).unwrap();
            prop_assert_eq!(p.per_layer.len(), 2);
            prop_assert!(p.per_layer.iter().all(|d| (0.0..=1.0).contains(d)));
        }
    }
}
