//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "HOVLECKP" | u32 version | u64 config length | canonical config JSON
//! u32 tensor count | per tensor: u32 name length, name, u8 dtype, u32 rank, u64 dims[rank]
//! raw element bytes of every tensor, in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::{sha256_hex, ModelConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

use super::write_atomic;

pub const MAGIC: &[u8; 8] = b"HOVLECKP";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint<F: Real>(model: &Model<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().canonical_json();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("refusing to save non-finite tensor {name}")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.code());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, _, t) in params.iter() {
        out.extend_from_slice(&t.bytes_le());
    }
    Ok(out)
}

/// Writes the checkpoint atomically and returns the SHA-256 of the file bytes.
pub fn save_checkpoint<F: Real>(path: &Path, model: &Model<F>) -> Result<String> {
    let bytes = encode_checkpoint(model)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> std::result::Result<usize, CheckpointError> {
        usize::try_from(self.u64(what)?).map_err(|_| CheckpointError::Malformed(format!("{what} overflows")))
    }
}

/// One stored tensor as listed by [`inspect_checkpoint`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub file_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

struct Raw<'a> {
    version: u32,
    config: ModelConfig,
    tensors: Vec<(String, DType, Vec<usize>, &'a [u8])>,
}

fn parse(buf: &[u8]) -> std::result::Result<Raw<'_>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.is_empty() {
        return Err(CheckpointError::Truncated("magic"));
    }
    let magic = r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let n = r.len("config length")?;
    let cfg_bytes = r.take(n, "config")?;
    let config: ModelConfig =
        serde_json::from_slice(cfg_bytes).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut headers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nl = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(nl, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype =
            DType::from_code(code).ok_or_else(|| CheckpointError::Malformed(format!("{name}: unknown dtype {code}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("dims")?);
        }
        let bytes = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: size overflows")))?;
        headers.push((name, dtype, shape, bytes));
    }
    let mut tensors = Vec::with_capacity(headers.len());
    for (name, dtype, shape, bytes) in headers {
        let data = r.take(bytes, "tensor data")?;
        tensors.push((name, dtype, shape, data));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(Raw {
        version,
        config,
        tensors,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes a checkpoint held in memory.
pub fn decode_checkpoint<F: Real>(buf: &[u8]) -> Result<Model<F>> {
    let raw = parse(buf)?;
    let mut params = ParamStore::new();
    for (name, dtype, shape, data) in raw.tensors {
        if dtype != F::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                name,
                found: dtype.name().into(),
                expected: F::DTYPE.name().into(),
            }
            .into());
        }
        let values = data.chunks_exact(dtype.size()).map(F::read_le).collect();
        let t = Tensor::new(shape, values)?;
        params
            .insert(name.clone(), t)
            .map_err(|_| CheckpointError::Malformed(format!("duplicate tensor {name}")))?;
    }
    Model::from_parts(raw.config, params)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Model<F>> {
    decode_checkpoint(&read(path)?)
}

/// Loads a checkpoint and requires its configuration to equal `expected`.
pub fn load_checkpoint_into<F: Real>(path: &Path, expected: &ModelConfig) -> Result<Model<F>> {
    let buf = read(path)?;
    let raw = parse(&buf)?;
    if &raw.config != expected {
        // name the first tensor whose shape differs, if any
        let want = crate::model::param_specs(expected);
        for (name, _, shape, _) in &raw.tensors {
            if let Some(s) = want.iter().find(|s| &s.name == name) {
                if &s.shape != shape {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: s.shape.clone(),
                        found: shape.clone(),
                    }
                    .into());
                }
            }
        }
        return Err(CheckpointError::Malformed("stored configuration differs from the requested one".into()).into());
    }
    decode_checkpoint(&buf)
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let buf = read(path)?;
    let raw = parse(&buf)?;
    Ok(CheckpointInfo {
        version: raw.version,
        config_hash: raw.config.hash(),
        config: raw.config,
        file_sha256: sha256_hex(&buf),
        tensors: raw
            .tensors
            .into_iter()
            .map(|(name, dtype, shape, data)| TensorEntry {
                name,
                dtype: dtype.name().into(),
                shape,
                sha256: sha256_hex(data),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 2,
            embed_depth: 1,
            llm_depth: 1,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Model::<f32>::new(ModelConfig::desk()).unwrap();
        let h = save_checkpoint(&path, &m).unwrap();
        let back: Model<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().hash_all(), m.params().hash_all());
        assert_eq!(encode_checkpoint(&back).unwrap(), fs::read(&path).unwrap());
        assert_eq!(inspect_checkpoint(&path).unwrap().file_sha256, h);
    }

    #[test]
    fn distinct_load_errors() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let good = encode_checkpoint(&m).unwrap();
        let err = |b: &[u8]| match decode_checkpoint::<f32>(b) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
        };
        assert_eq!(err(&[]), CheckpointError::Truncated("magic"));
        assert_eq!(err(b"NOTACKPTxxxx"), CheckpointError::BadMagic);
        let mut v = good.clone();
        v[8] = 9;
        assert!(matches!(err(&v), CheckpointError::VersionMismatch { found: 9, .. }));
        assert!(matches!(err(&good[..good.len() - 3]), CheckpointError::Truncated(_)));
        let mut t = good.clone();
        t.push(0);
        assert_eq!(err(&t), CheckpointError::TrailingBytes);
        assert!(matches!(
            decode_checkpoint::<f64>(&good),
            Err(Error::Checkpoint(CheckpointError::DtypeMismatch { .. }))
        ));
    }

    #[test]
    fn mismatched_config_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&path, &Model::<f32>::new(tiny()).unwrap()).unwrap();
        let wider = ModelConfig { hidden: 32, ..tiny() };
        match load_checkpoint_into::<f32>(&path, &wider) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. })) => assert!(name.starts_with("embed.")),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }
}
