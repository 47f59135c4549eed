//! Persistence: checkpoints, run configuration files and run manifests.

pub mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{canonical_json, sha256_hex, ModelConfig};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::train::{Preset, StageId, StagePlan, TeacherKind};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, inspect_checkpoint, load_checkpoint, load_checkpoint_into, save_checkpoint,
    CheckpointInfo, TensorEntry,
};

/// Writes to a sibling temporary file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Everything a run needs besides command-line flags. Absent stage plans fall back
/// to the selected preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_teacher")]
    pub teacher: TeacherKind,
    #[serde(default)]
    pub distill: Option<StagePlan>,
    #[serde(default)]
    pub align: Option<StagePlan>,
    #[serde(default)]
    pub instruct: Option<StagePlan>,
    /// Training data generated when no data directory is given.
    #[serde(default)]
    pub data: Option<DatasetSpec>,
}

fn default_teacher() -> TeacherKind {
    TeacherKind::Transformer
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            teacher: default_teacher(),
            distill: None,
            align: None,
            instruct: None,
            data: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        for plan in [&cfg.distill, &cfg.align, &cfg.instruct].into_iter().flatten() {
            plan.validate()?;
        }
        Ok(cfg)
    }

    /// The plan for `stage`: the configured one if present, else the preset.
    pub fn plan(&self, stage: StageId, preset: Preset) -> Result<StagePlan> {
        let configured = match stage {
            StageId::Distill => &self.distill,
            StageId::Align => &self.align,
            StageId::Instruct => &self.instruct,
            StageId::Backbone => &None,
        };
        let plan = configured.clone().unwrap_or_else(|| StagePlan::preset(preset, stage));
        if plan.stage != stage {
            return Err(Error::Config(format!(
                "plan under \"{}\" declares stage {}",
                stage.name(),
                plan.stage.name()
            )));
        }
        Ok(plan)
    }

    pub fn canonical_json(&self) -> String {
        canonical_json(self)
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Bookkeeping that ties every artifact of a run to its configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub code_version: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn begin<T: Serialize>(command: &str, config: &T, seed: u64) -> Self {
        let config_json = canonical_json(config);
        let config_hash = sha256_hex(config_json.as_bytes());
        let started = unix_ms();
        let run_id = sha256_hex(format!("{command}|{config_hash}|{seed}|{started}").as_bytes())[..16].to_string();
        RunManifest {
            run_id,
            command: command.to_string(),
            config_hash,
            config: serde_json::from_str(&config_json).expect("canonical JSON parses"),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            stages: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_ms: started,
            finished_unix_ms: None,
        }
    }

    /// True when the stored config hash is the hash of the stored config.
    pub fn config_hash_matches(&self) -> bool {
        sha256_hex(canonical_json(&self.config).as_bytes()) == self.config_hash
    }

    /// Stamps the finish time and writes `manifest.json` under `dir` atomically.
    pub fn finish(&mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix_ms = Some(unix_ms());
        let path = dir.join(MANIFEST_FILE);
        write_json_atomic(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn manifest_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::desk();
        let mut m = RunManifest::begin("distill", &cfg, 7);
        m.stages.push("distill".into());
        let path = m.finish(dir.path()).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.config_hash_matches());
        assert_eq!(back.config_hash, cfg.hash());
    }

    #[test]
    fn run_config_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, RunConfig::desk().canonical_json()).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg, RunConfig::desk());
        assert_eq!(cfg.plan(StageId::Align, Preset::Desk).unwrap(), StagePlan::desk(StageId::Align));
        fs::write(&p, r#"{"model": {"hidden": 64}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        let mut bad = RunConfig::desk();
        bad.align = Some(StagePlan::desk(StageId::Instruct));
        assert!(bad.plan(StageId::Align, Preset::Desk).is_err());
    }

    #[test]
    fn shipped_schema_lists_every_key() {
        let schema: serde_json::Value = serde_json::from_str(include_str!("../../../../docs/config.schema.json")).unwrap();
        let mut full = RunConfig::desk();
        for stage in [StageId::Distill, StageId::Align, StageId::Instruct] {
            let plan = Some(StagePlan::desk(stage));
            match stage {
                StageId::Distill => full.distill = plan,
                StageId::Align => full.align = plan,
                _ => full.instruct = plan,
            }
        }
        full.data = Some(DatasetSpec {
            kind: crate::data::DatasetKind::ShapesQa,
            count: 1,
            seed: 0,
            image_size: 32,
        });
        let value = serde_json::to_value(&full).unwrap();
        let keys = |v: &serde_json::Value| -> Vec<String> {
            let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
            k.sort();
            k
        };
        let defs = &schema["$defs"];
        assert_eq!(keys(&value), keys(&schema["properties"]));
        assert_eq!(keys(&value["model"]), keys(&defs["model"]["properties"]));
        assert_eq!(keys(&value["align"]), keys(&defs["plan"]["properties"]));
        assert_eq!(keys(&value["data"]), keys(&defs["dataset"]["properties"]));
        let required = |d: &str| defs[d]["required"].as_array().unwrap().len();
        assert_eq!(required("model"), keys(&value["model"]).len());
        assert_eq!(required("plan"), keys(&value["align"]).len());
    }
}
