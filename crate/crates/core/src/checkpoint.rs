//! Named-parameter checkpoints and their on-disk format.
//!
//! File layout: magic `GTCK`, format version (u32 LE), manifest length
//! (u64 LE), a UTF-8 manifest with one line per tensor
//! (`name\tf32\tdim1,dim2,...\tbyte_offset\tbyte_length`, sorted by name),
//! then the concatenated little-endian f32 payloads. Byte offsets are
//! relative to the start of the payload section.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"GTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: tensor {name} wants {wanted} bytes at offset {offset}, payload has {available}")]
    Truncated {
        name: String,
        offset: u64,
        wanted: u64,
        available: u64,
    },
    #[error("manifest/payload mismatch: {0}")]
    ManifestMismatch(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("checkpoints are not shape-compatible: {0}")]
    Incompatible(String),
}

/// Ordered name -> tensor map with a step id; the unit of merging.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    params: BTreeMap<String, Tensor>,
    pub step_id: u64,
    pub tag: String,
}

impl Checkpoint {
    pub fn new(step_id: u64, tag: impl Into<String>) -> Self {
        Self {
            params: BTreeMap::new(),
            step_id,
            tag: tag.into(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), CheckpointError> {
        let name = name.into();
        if name.is_empty() || name.contains('\t') || name.contains('\n') {
            return Err(CheckpointError::InvalidName(name));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Lexicographic by name.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Same name set and per-name shapes.
    pub fn shape_compatible(&self, other: &Checkpoint) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .all(|(n, t)| other.params.get(n).is_some_and(|o| o.same_shape(t)))
    }

    fn require_compatible(&self, other: &Checkpoint) -> Result<(), CheckpointError> {
        if !self.shape_compatible(other) {
            let lhs: Vec<_> = self.names().cloned().collect();
            let rhs: Vec<_> = other.names().cloned().collect();
            return Err(CheckpointError::Incompatible(format!(
                "names/shapes differ (lhs {lhs:?}, rhs {rhs:?})"
            )));
        }
        Ok(())
    }

    /// Per-name elementwise `self - base`; step id copied from `self`.
    pub fn delta(&self, base: &Checkpoint) -> Result<Checkpoint, CheckpointError> {
        self.require_compatible(base)?;
        let mut out = Checkpoint::new(self.step_id, self.tag.clone());
        for (name, t) in &self.params {
            out.insert(name.clone(), Tensor::sub(t, &base.params[name])?)?;
        }
        Ok(out)
    }

    /// Per-name elementwise `self + other`.
    pub fn add(&self, other: &Checkpoint) -> Result<Checkpoint, CheckpointError> {
        self.require_compatible(other)?;
        let mut out = Checkpoint::new(self.step_id, self.tag.clone());
        for (name, t) in &self.params {
            out.insert(name.clone(), Tensor::add(t, &other.params[name])?)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let mut payload: Vec<u8> = Vec::new();
        for (name, tensor) in &self.params {
            let offset = payload.len() as u64;
            for v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let length = payload.len() as u64 - offset;
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "{name}\tf32\t{}\t{offset}\t{length}\n",
                dims.join(",")
            ));
        }
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::ManifestMismatch(
                "file shorter than fixed header".into(),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + manifest_len {
            return Err(CheckpointError::ManifestMismatch(format!(
                "declared manifest length {manifest_len} exceeds file size"
            )));
        }
        let manifest = std::str::from_utf8(&bytes[16..16 + manifest_len])
            .map_err(|e| CheckpointError::ManifestMismatch(format!("manifest not UTF-8: {e}")))?;
        let payload = &bytes[16 + manifest_len..];

        let mut ckpt = Checkpoint::new(0, "");
        let mut expected_offset = 0u64;
        let mut prev_name: Option<String> = None;
        for line in manifest.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(CheckpointError::ManifestMismatch(format!(
                    "manifest line has {} fields: {line:?}",
                    fields.len()
                )));
            }
            let name = fields[0].to_string();
            if let Some(prev) = &prev_name {
                if *prev >= name {
                    return Err(CheckpointError::ManifestMismatch(format!(
                        "manifest not sorted: {prev:?} before {name:?}"
                    )));
                }
            }
            if fields[1] != "f32" {
                return Err(CheckpointError::ManifestMismatch(format!(
                    "unsupported dtype {:?}",
                    fields[1]
                )));
            }
            let shape: Vec<usize> = fields[2]
                .split(',')
                .map(|d| {
                    d.parse::<usize>().map_err(|e| {
                        CheckpointError::ManifestMismatch(format!("bad dim {d:?}: {e}"))
                    })
                })
                .collect::<Result<_, _>>()?;
            let offset: u64 = fields[3]
                .parse()
                .map_err(|e| CheckpointError::ManifestMismatch(format!("bad offset: {e}")))?;
            let length: u64 = fields[4]
                .parse()
                .map_err(|e| CheckpointError::ManifestMismatch(format!("bad length: {e}")))?;
            let count: usize = shape.iter().product();
            if length != count as u64 * 4 {
                return Err(CheckpointError::ManifestMismatch(format!(
                    "tensor {name}: shape {shape:?} wants {} bytes, manifest says {length}",
                    count * 4
                )));
            }
            if offset != expected_offset {
                return Err(CheckpointError::ManifestMismatch(format!(
                    "tensor {name}: offset {offset}, expected {expected_offset}"
                )));
            }
            if offset + length > payload.len() as u64 {
                return Err(CheckpointError::Truncated {
                    name,
                    offset,
                    wanted: length,
                    available: payload.len() as u64,
                });
            }
            let start = offset as usize;
            let data: Vec<f32> = payload[start..start + length as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            ckpt.insert(name.clone(), Tensor::new(shape, data)?)?;
            expected_offset = offset + length;
            prev_name = Some(name);
        }
        if expected_offset != payload.len() as u64 {
            return Err(CheckpointError::ManifestMismatch(format!(
                "payload has {} bytes, manifest accounts for {expected_offset}",
                payload.len()
            )));
        }
        Ok(ckpt)
    }
}

/// Append-only history of training checkpoints, anchored at the initial model.
///
/// The base is also the first history entry, so a fresh buffer already
/// holds one mergeable checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointBuffer {
    base: Checkpoint,
    history: Vec<Checkpoint>,
}

impl CheckpointBuffer {
    pub fn new(base: Checkpoint) -> Self {
        let history = vec![base.clone()];
        Self { base, history }
    }

    pub fn base(&self) -> &Checkpoint {
        &self.base
    }

    pub fn history(&self) -> &[Checkpoint] {
        &self.history
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn push(&mut self, ckpt: Checkpoint) -> Result<(), CheckpointError> {
        if !ckpt.shape_compatible(&self.base) {
            return Err(CheckpointError::Incompatible(
                "new entry does not match the buffer base".into(),
            ));
        }
        if let Some(last) = self.history.last() {
            if ckpt.step_id <= last.step_id {
                return Err(CheckpointError::Incompatible(format!(
                    "step_id {} not greater than last {}",
                    ckpt.step_id, last.step_id
                )));
            }
        }
        self.history.push(ckpt);
        Ok(())
    }
}
