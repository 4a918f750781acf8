// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor files and activation-dump directories.
//!
//! A tensor file is laid out as follows, every integer little-endian:
//!
//! | offset       | size        | content                          |
//! |--------------|-------------|----------------------------------|
//! | 0            | 8           | magic `LSTENS01`                 |
//! | 8            | 4 (`u32`)   | dtype tag, `0` = f32             |
//! | 12           | 4 (`u32`)   | rank, `1..=4`                    |
//! | 16           | 8 × rank    | shape, `u64` per axis, row-major |
//! | 16 + 8×rank  | 4 × numel   | payload, f32                     |
//!
//! Nothing may follow the payload.
//!
//! A dump directory holds `manifest.json`, `labels.json` (one language code
//! per row) and one `layer_{i}.lstens` matrix per layer. Rows are grouped by
//! language in manifest order, so row `lang * N + sample` is sample `sample`
//! of language `lang`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::direction_finder::ActivationMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LSTENS01";
pub const MAX_RANK: usize = 4;
const DTYPE_F32: u32 = 0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.json";

/// Shape plus row-major payload, as stored in a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = checked_numel(&shape)?;
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &dim in &self.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!(
                "{} bytes, header needs at least 16",
                bytes.len()
            )));
        }
        let mut magic = [0u8; 8];
        magic.copy_from_slice(&bytes[..8]);
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated("header".into()));
        }
        let dtype = read_u32(&bytes[8..12]);
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let rank = read_u32(&bytes[12..16]) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::InvalidShape(vec![rank]));
        }
        let shape_end = 16 + 8 * rank;
        if bytes.len() < shape_end {
            return Err(Error::Truncated("shape list".into()));
        }
        let shape = bytes[16..shape_end]
            .chunks_exact(8)
            .map(|c| {
                let v = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
                usize::try_from(v).map_err(|_| Error::InvalidShape(vec![usize::MAX]))
            })
            .collect::<Result<Vec<_>>>()?;
        let numel = checked_numel(&shape)?;
        let payload = &bytes[shape_end..];
        let needed = numel
            .checked_mul(4)
            .ok_or_else(|| Error::InvalidShape(shape.clone()))?;
        if payload.len() < needed {
            return Err(Error::Truncated(format!(
                "header claims {numel} floats, payload has {}",
                payload.len() / 4
            )));
        }
        if payload.len() > needed {
            return Err(Error::TrailingData(payload.len() - needed));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self { shape, data })
    }
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4-byte slice"))
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(shape.to_vec()))
}

/// Writes `data` with the given shape. Shape and length are checked before
/// the file is touched.
pub fn write_tensor(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let expected = checked_numel(shape)?;
    if expected != data.len() {
        return Err(Error::ShapeMismatch {
            shape: shape.to_vec(),
            expected,
            actual: data.len(),
        });
    }
    let tensor = Tensor {
        shape: shape.to_vec(),
        data: data.to_vec(),
    };
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    LastToken,
}

/// Describes a parallel corpus dump: which languages, how many parallel
/// samples per language, and the model geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub languages: Vec<String>,
    pub samples_per_language: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub pooling: Pooling,
    #[serde(default)]
    pub source: String,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Manifest("no languages".into()));
        }
        for (i, lang) in self.languages.iter().enumerate() {
            if lang.is_empty() {
                return Err(Error::Manifest(format!("language {i} is empty")));
            }
            if self.languages[..i].contains(lang) {
                return Err(Error::Manifest(format!("duplicate language {lang:?}")));
            }
        }
        if self.samples_per_language < 2 {
            return Err(Error::Manifest("samples_per_language must be >= 2".into()));
        }
        if self.hidden_dim < 2 {
            return Err(Error::Manifest("hidden_dim must be >= 2".into()));
        }
        if self.layers < 1 {
            return Err(Error::Manifest("layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_rows(&self) -> usize {
        self.languages.len() * self.samples_per_language
    }

    /// Row labels implied by the grouping rule.
    pub fn row_labels(&self) -> Vec<String> {
        self.languages
            .iter()
            .flat_map(|l| std::iter::repeat_n(l.clone(), self.samples_per_language))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn layer_file_name(layer: usize) -> String {
    format!("layer_{layer}.lstens")
}

/// Handle on a dump directory. Layers are loaded on demand.
#[derive(Debug, Clone)]
pub struct Dump {
    root: PathBuf,
    manifest: CorpusManifest,
    labels: Vec<String>,
    manifest_sha256: String,
}

impl Dump {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest_bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_slice(&manifest_bytes).map_err(|e| Error::json(MANIFEST_FILE, e))?;
        manifest.validate()?;

        let labels_path = root.join(LABELS_FILE);
        let labels_bytes = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let labels: Vec<String> =
            serde_json::from_slice(&labels_bytes).map_err(|e| Error::json(LABELS_FILE, e))?;
        if labels != manifest.row_labels() {
            return Err(Error::Manifest(
                "labels.json does not match the manifest's language grouping".into(),
            ));
        }
        Ok(Self {
            root,
            manifest,
            labels,
            manifest_sha256: sha256_hex(&manifest_bytes),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// SHA-256 of the raw `manifest.json` bytes; used to tie derived files
    /// back to the dump they came from.
    pub fn manifest_sha256(&self) -> &str {
        &self.manifest_sha256
    }

    pub fn load_layer(&self, layer: usize) -> Result<ActivationMatrix> {
        if layer >= self.manifest.layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range, dump has {}",
                self.manifest.layers
            )));
        }
        let tensor = read_tensor(self.root.join(layer_file_name(layer)))?;
        let expected = [self.manifest.total_rows(), self.manifest.hidden_dim];
        if tensor.shape != expected {
            return Err(Error::ShapeMismatch {
                shape: tensor.shape.clone(),
                expected: expected[0] * expected[1],
                actual: tensor.data.len(),
            });
        }
        ActivationMatrix::from_f32(
            layer,
            expected[0],
            expected[1],
            &tensor.data,
            self.labels.clone(),
        )
    }

    pub fn load_all(&self) -> Result<Vec<ActivationMatrix>> {
        (0..self.manifest.layers)
            .map(|l| self.load_layer(l))
            .collect()
    }
}

/// Writes a complete dump directory. `layers[i]` must carry layer index `i`
/// and the labels implied by the manifest.
pub fn write_dump(
    dir: impl AsRef<Path>,
    manifest: &CorpusManifest,
    layers: &[ActivationMatrix],
) -> Result<()> {
    manifest.validate()?;
    let dir = dir.as_ref();
    if layers.len() != manifest.layers {
        return Err(Error::Manifest(format!(
            "manifest declares {} layers, got {}",
            manifest.layers,
            layers.len()
        )));
    }
    let labels = manifest.row_labels();
    for (i, acts) in layers.iter().enumerate() {
        if acts.layer_index() != i {
            return Err(Error::Manifest(format!(
                "layer slot {i} holds layer index {}",
                acts.layer_index()
            )));
        }
        if acts.dim() != manifest.hidden_dim || acts.labels() != labels.as_slice() {
            return Err(Error::Manifest(format!(
                "layer {i} does not match manifest geometry or labels"
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.to_json()).map_err(|e| Error::io(&manifest_path, e))?;
    let labels_path = dir.join(LABELS_FILE);
    let labels_json = serde_json::to_string(&labels).expect("labels serialize");
    fs::write(&labels_path, labels_json).map_err(|e| Error::io(&labels_path, e))?;
    for acts in layers {
        write_tensor(
            dir.join(layer_file_name(acts.layer_index())),
            &[acts.rows(), acts.dim()],
            &acts.to_f32(),
        )?;
    }
    Ok(())
}
