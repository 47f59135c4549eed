//! Samples, synthetic dataset generation and the on-disk PPM + JSONL layout.

pub mod shapes;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::input::sequence::{assemble_sample, encode_image, random_distill_ids};
use crate::input::tokenizer::{bytes_to_text, text_to_bytes, tokenize, BYTE_VOCAB};
use crate::input::{RawImage, TokenSequence};

/// One training example before tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Option<RawImage>,
    pub query: Vec<u8>,
    pub response: Vec<u8>,
}

impl Sample {
    pub fn to_sequence(&self, cfg: &ModelConfig) -> Result<TokenSequence> {
        let patches = self.image.as_ref().map(|img| encode_image(img, cfg)).transpose()?;
        assemble_sample(patches, &tokenize(&self.query), &tokenize(&self.response))
    }

    /// Same text without the image.
    pub fn text_only(&self) -> Sample {
        Sample {
            image: None,
            ..self.clone()
        }
    }
}

pub fn encode_all(samples: &[Sample], cfg: &ModelConfig) -> Result<Vec<TokenSequence>> {
    samples.iter().map(|s| s.to_sequence(cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Uniform-noise images with 50 + 50 random byte tokens.
    RandomDistill,
    /// Shape scenes with an empty query and the caption as response.
    ShapesCaption,
    /// Shape scenes with a question and its answer.
    ShapesQa,
    /// Existing directory of PPM images and a JSONL file (input only).
    JsonlDir,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
}

/// Samples described by `spec`, identical for identical specs.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    if spec.count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    if spec.image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    (0..spec.count)
        .map(|_| match spec.kind {
            DatasetKind::RandomDistill => {
                let mut px = vec![0u8; n * n * 3];
                rng.fill(px.as_mut_slice());
                let (q, r) = random_distill_ids(&mut rng, BYTE_VOCAB)?;
                Ok(Sample {
                    image: Some(RawImage::new(n, n, px)?),
                    query: q.into_iter().map(|id| id as u8).collect(),
                    response: r.into_iter().map(|id| id as u8).collect(),
                })
            }
            DatasetKind::ShapesCaption => {
                let scene = shapes::random_scene(&mut rng, n)?;
                Ok(Sample {
                    image: Some(shapes::render(&scene)?),
                    query: Vec::new(),
                    response: shapes::caption(&scene.prims).into_bytes(),
                })
            }
            DatasetKind::ShapesQa => {
                let scene = shapes::random_scene(&mut rng, n)?;
                let (q, a) = shapes::random_qa(&mut rng, &scene);
                Ok(Sample {
                    image: Some(shapes::render(&scene)?),
                    query: q.into_bytes(),
                    response: a.into_bytes(),
                })
            }
            DatasetKind::JsonlDir => Err(Error::Usage("jsonl-dir is an input source, not a generator".into())),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Line {
    image: Option<String>,
    query: String,
    response: String,
}

pub const SAMPLES_FILE: &str = "samples.jsonl";

/// Writes `images/NNNNNN.ppm` and `samples.jsonl` under `dir`; returns the written paths.
pub fn write_samples(samples: &[Sample], dir: &Path) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut written = Vec::with_capacity(samples.len() + 1);
    let mut jsonl = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = s.image.as_ref().map(|_| format!("images/{i:06}.ppm"));
        if let (Some(img), Some(rel)) = (&s.image, &rel) {
            let path = dir.join(rel);
            img.write_ppm(&path)?;
            written.push(path);
        }
        let line = Line {
            image: rel,
            query: bytes_to_text(&s.query),
            response: bytes_to_text(&s.response),
        };
        serde_json::to_writer(&mut jsonl, &line)?;
        jsonl.push(b'\n');
    }
    let path = dir.join(SAMPLES_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&jsonl).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    write_samples(&generate_samples(spec)?, dir)
}

/// Reads `samples.jsonl` from `dir`; image paths are relative to `dir`.
pub fn load_jsonl_dir(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(SAMPLES_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let image = l.image.map(|rel| RawImage::read_ppm(&dir.join(rel))).transpose()?;
        out.push(Sample {
            image,
            query: text_to_bytes(&l.query),
            response: text_to_bytes(&l.response),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_distill_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            kind: DatasetKind::RandomDistill,
            count: 10,
            seed: 3,
            image_size: 32,
        };
        let files = make_dataset(&spec, dir.path()).unwrap();
        assert_eq!(files.len(), 11);
        let back = load_jsonl_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        assert!(back.iter().all(|s| s.response.len() == 50 && s.query.len() == 50));
        assert_eq!(back, generate_samples(&spec).unwrap());
    }

    #[test]
    fn generation_is_deterministic_on_disk() {
        let spec = DatasetSpec {
            kind: DatasetKind::ShapesQa,
            count: 5,
            seed: 11,
            image_size: 32,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = make_dataset(&spec, a.path()).unwrap();
        let fb = make_dataset(&spec, b.path()).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }

    #[test]
    fn captions_match_pixels() {
        let spec = DatasetSpec {
            kind: DatasetKind::ShapesCaption,
            count: 50,
            seed: 2,
            image_size: 32,
        };
        for s in generate_samples(&spec).unwrap() {
            let found = shapes::detect(s.image.as_ref().unwrap());
            assert_eq!(shapes::caption(&found).into_bytes(), s.response);
        }
    }

    #[test]
    fn bad_specs() {
        let mut spec = DatasetSpec {
            kind: DatasetKind::JsonlDir,
            count: 1,
            seed: 0,
            image_size: 32,
        };
        assert!(matches!(generate_samples(&spec), Err(Error::Usage(_))));
        spec.count = 0;
        assert!(generate_samples(&spec).is_err());
    }
}
