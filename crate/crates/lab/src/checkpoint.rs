//! TDAC1 checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TDAC"  u32 version = 1
//! u32 metadata length, UTF-8 JSON metadata
//! u32 array count
//! per array: u16 name length, UTF-8 name, u8 rank, u32 × rank dims,
//!            u8 dtype (0 = f32), payload
//! ```
//!
//! The loader walks every header and checks declared sizes against the file
//! length before it allocates any payload buffer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tdaa_core::models::{Arch, ModelParams};
use tdaa_core::Tensor;

use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"TDAC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("file ends inside {0}")]
    Truncated(String),
    #[error("array {name:?}: declares {declared} payload bytes, {available} remain")]
    SizeMismatch {
        name: String,
        declared: u64,
        available: u64,
    },
    #[error("array {name:?}: dtype {dtype} is not 0 (f32)")]
    Dtype { name: String, dtype: u8 },
    #[error("array {name:?}: {detail}")]
    BadArray { name: String, detail: String },
    #[error("{0} trailing bytes after the last array")]
    Trailing(usize),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("parameters: {0}")]
    Params(#[from] tdaa_core::Error),
}

/// JSON metadata block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    /// Architecture descriptor (`encoder`, `generator`, `head:K`, ...) or
    /// `fixed_noise`.
    pub arch: String,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

pub const FIXED_NOISE_ARCH: &str = "fixed_noise";

impl Checkpoint {
    pub fn from_params(params: &ModelParams, metadata: Metadata) -> Self {
        Checkpoint {
            metadata: Metadata {
                arch: params.arch().descriptor(),
                ..metadata
            },
            arrays: params.tensors().to_vec(),
        }
    }

    /// Rebuilds model parameters, checking names and shapes against the
    /// recorded architecture.
    pub fn to_params(&self) -> Result<ModelParams, CheckpointError> {
        let arch = Arch::parse(&self.metadata.arch)?;
        Ok(ModelParams::from_tensors(arch, self.arrays.clone())?)
    }

    pub fn fixed_noise(delta: &Tensor<f32>, metadata: Metadata) -> Self {
        Checkpoint {
            metadata: Metadata {
                arch: FIXED_NOISE_ARCH.into(),
                ..metadata
            },
            arrays: vec![("delta".into(), delta.clone())],
        }
    }

    pub fn to_fixed_noise(&self) -> Result<Tensor<f32>, CheckpointError> {
        match (self.metadata.arch.as_str(), self.arrays.as_slice()) {
            (FIXED_NOISE_ARCH, [(name, t)]) if name == "delta" && t.shape() == [3, 32, 32] => {
                Ok(t.clone())
            }
            _ => Err(CheckpointError::Metadata(format!(
                "expected a fixed-noise checkpoint with one [3,32,32] delta, found {}",
                self.metadata.arch
            ))),
        }
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let meta = serde_json::to_vec(&ckpt.metadata).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let mut out = Vec::with_capacity(
        16 + meta.len() + ckpt.arrays.iter().map(|(n, t)| 16 + n.len() + 4 * t.len()).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta.len()).expect("metadata under 4 GiB").to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.arrays {
        let bad = |detail: &str| CheckpointError::BadArray {
            name: name.clone(),
            detail: detail.into(),
        };
        let n = u16::try_from(name.len()).map_err(|_| bad("name longer than 65535 bytes"))?;
        let rank = u8::try_from(t.rank()).map_err(|_| bad("rank above 255"))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| bad("dimension above u32"))?.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

struct ArrayHeader {
    name: String,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.take(meta_len, "metadata")?;
    let metadata: Metadata = serde_json::from_slice(meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let count = r.u32("array count")? as usize;

    // Pass 1: headers only.
    let mut headers = Vec::new();
    for i in 0..count {
        let what = format!("header of array #{i}");
        let name_len = r.u16(&what)? as usize;
        let name = String::from_utf8(r.take(name_len, &what)?.to_vec())
            .map_err(|_| CheckpointError::BadArray {
                name: format!("#{i}"),
                detail: "name is not UTF-8".into(),
            })?;
        let rank = r.u8(&what)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&what)? as usize);
        }
        let dtype = r.u8(&what)?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Dtype { name, dtype });
        }
        let elems = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let declared = elems.and_then(|e| e.checked_mul(4)).unwrap_or(u64::MAX);
        if dims.contains(&0) {
            return Err(CheckpointError::BadArray {
                name,
                detail: format!("zero-sized dimension in {dims:?}"),
            });
        }
        if declared > r.remaining() as u64 {
            return Err(CheckpointError::SizeMismatch {
                name,
                declared,
                available: r.remaining() as u64,
            });
        }
        let len = declared as usize;
        headers.push(ArrayHeader {
            name,
            dims,
            offset: r.pos,
            len,
        });
        r.pos += len;
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Trailing(r.remaining()));
    }

    // Pass 2: payloads, now known to fit.
    let mut arrays = Vec::with_capacity(headers.len());
    for h in headers {
        let data: Vec<f32> = bytes[h.offset..h.offset + h.len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&h.dims, data).map_err(|e| CheckpointError::BadArray {
            name: h.name.clone(),
            detail: e.to_string(),
        })?;
        arrays.push((h.name, t));
    }
    Ok(Checkpoint { metadata, arrays })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = encode(ckpt)?;
    fsutil::write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
