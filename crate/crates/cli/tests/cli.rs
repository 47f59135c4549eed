use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hovle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hovle"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hovle(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn make_data_is_deterministic_and_complete() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["make-data", "--kind", "random-distill", "--count", "10", "--out", "a", "--seed", "4"]);
    ok(t.path(), &["make-data", "--kind", "random-distill", "--count", "10", "--out", "b", "--seed", "4"]);
    let ppm = fs::read_dir(t.path().join("a/images")).unwrap().count();
    assert_eq!(ppm, 10);
    let a = fs::read_to_string(t.path().join("a/samples.jsonl")).unwrap();
    assert_eq!(a, fs::read_to_string(t.path().join("b/samples.jsonl")).unwrap());
    assert_eq!(a.lines().count(), 10);
    for line in a.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["response"].as_str().unwrap().chars().count(), 50);
    }
    for i in 0..10 {
        let f = format!("images/{i:06}.ppm");
        assert_eq!(fs::read(t.path().join("a").join(&f)).unwrap(), fs::read(t.path().join("b").join(&f)).unwrap());
    }
}

#[test]
fn three_stage_pipeline_with_manifests() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["make-data", "--kind", "shapes-caption", "--count", "12", "--out", "data"]);
    let s = ok(
        d,
        &["distill", "--seed", "0", "--out", "runs/d0", "--steps", "4", "--batch", "2", "--backbone-steps", "3"],
    );
    assert!(s.contains("distill: 4 steps"));
    ok(
        d,
        &["align", "--ckpt", "runs/d0/model.ckpt", "--data", "data", "--out", "runs/a0", "--steps", "3", "--batch", "2"],
    );
    ok(
        d,
        &["finetune", "--ckpt", "runs/a0/model.ckpt", "--data", "data", "--out", "runs/f0", "--steps", "2", "--batch", "2"],
    );
    for run in ["d0", "a0", "f0"] {
        let dir = d.join("runs").join(run);
        for f in ["model.ckpt", "train.jsonl", "report.json", "manifest.json"] {
            assert!(dir.join(f).exists(), "{run}/{f}");
        }
        let m = hovle_core::store::RunManifest::load(&dir.join("manifest.json")).unwrap();
        assert!(m.config_hash_matches());
        assert!(m.finished_unix_ms.is_some());
    }
    let log = fs::read_to_string(d.join("runs/d0/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3 + 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["step", "loss", "lr", "wall_ms"] {
        assert!(first.get(k).is_some());
    }
    let inspect = ok(d, &["inspect-ckpt", "--ckpt", "runs/f0/model.ckpt"]);
    let v: serde_json::Value = serde_json::from_str(&inspect).unwrap();
    assert_eq!(v["round_trip"], true);
    assert_eq!(v["config"]["hidden"], 64);
    assert!(v["tensors"].as_array().unwrap().iter().any(|t| t["name"] == "llm.head"));
    // nothing written outside the named output directories
    let mut top: Vec<String> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["data", "runs"]);
}

#[test]
fn generate_probe_and_bench() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["make-data", "--kind", "shapes-caption", "--count", "2", "--out", "data"]);
    ok(d, &["align", "--data", "data", "--out", "m", "--steps", "1", "--batch", "1"]);
    ok(
        d,
        &["generate", "--ckpt", "m/model.ckpt", "--image", "data/images/000000.ppm", "--max-new", "5", "--out", "g"],
    );
    let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("g/generation.json")).unwrap()).unwrap();
    assert!(!g["ids"].as_array().unwrap().is_empty());
    let probe = ok(
        d,
        &[
            "attn-probe", "--ckpt", "m/model.ckpt", "--image", "data/images/000001.ppm", "--out", "p", "--stack", "embed",
            "--layers", "0,3",
        ],
    );
    assert_eq!(probe.lines().count(), 2);
    for f in ["attention-embed-layer0.csv", "attention-embed-layer3.svg", "density.json", "manifest.json"] {
        assert!(d.join("p").join(f).exists(), "{f}");
    }
    let bench = ok(
        d,
        &["bench", "--ckpt", "m/model.ckpt", "--text-tokens", "8", "--max-new", "4", "--runs", "2", "--out", "b"],
    );
    assert!(bench.contains("cache on") && bench.contains("cache off"));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("b/bench.json")).unwrap()).unwrap();
    assert_eq!(reports[0]["ids"], reports[1]["ids"]);
}

#[test]
fn tiny_ablation_writes_tables() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let cfg = r#"{"model": {"hidden": 16, "heads": 2, "embed_depth": 1, "llm_depth": 1, "vocab": 264,
        "tile_size": 32, "patch_stride": 8, "max_tiles": 4, "pixel_shuffle": false, "ffn_multiple": 2.75,
        "rope_base": 10000.0, "max_seq_len": 512, "norm": "rms", "ffn": "swiglu", "rope": true,
        "norm_eps": 1e-6, "init_std": 0.02, "seed": 0}}"#;
    fs::write(d.join("c.json"), cfg).unwrap();
    let out = hovle(
        d,
        &[
            "ablate", "--config", "c.json", "--axis", "depth", "--out", "abl", "--backbone-steps", "2",
            "--distill-samples", "2", "--align-steps", "2", "--batch", "1", "--train-count", "3", "--eval-count", "2",
        ],
    );
    if !out.status.success() {
        // the config above must match the model schema; surface its error if not
        panic!("{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read_to_string(d.join("abl/ablation-depth.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().next().unwrap().contains("checkpoint_hash"));
    assert!(d.join("abl/ablation-depth.svg").exists());
    assert!(d.join("abl/manifest.json").exists());
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let unknown = hovle(d, &["distill", "--no-such-flag"]);
    assert_eq!(code(&unknown), 1);
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(code(&hovle(d, &["frobnicate"])), 1);
    assert_eq!(code(&hovle(d, &["distill", "--steps", "1"])), 1, "missing --out");
    assert_eq!(code(&hovle(d, &["inspect-ckpt", "--ckpt", "missing.ckpt"])), 2);
    fs::write(d.join("empty.ckpt"), b"").unwrap();
    let empty = hovle(d, &["inspect-ckpt", "--ckpt", "empty.ckpt"]);
    assert_eq!(code(&empty), 2);
    assert!(String::from_utf8_lossy(&empty.stderr).contains("truncated"));
    fs::write(d.join("bad.json"), r#"{"model": {"hidden": 64}}"#).unwrap();
    assert_eq!(code(&hovle(d, &["distill", "--config", "bad.json", "--out", "x"])), 1);
    assert_eq!(code(&hovle(d, &["--help"])), 0);
    assert_eq!(code(&hovle(d, &["make-data", "--kind", "shapes-caption", "--count", "0", "--out", "z"])), 1);
}

#[test]
fn paper_preset_is_selectable() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["distill", "--stage-preset", "paper", "--steps", "1", "--batch", "1", "--out", "p"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("p/manifest.json")).unwrap()).unwrap();
    let plan = &report["config"]["plans"][0];
    assert_eq!(plan["peak_lr"], 3e-4);
    assert_eq!(plan["warmup"]["steps"], 0);
}
