//! `FWDC` container: magic, `u32` version, `u32` header length, a JSON
//! header, then little-endian arrays in header order.

use std::fs;
use std::path::Path;

use fwd_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FwdError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWDC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Element type of the payload. Builds store their native precision so a
/// round trip is bit-exact.
#[cfg(not(feature = "f32"))]
pub const NATIVE_DTYPE: &str = "f64";
#[cfg(feature = "f32")]
pub const NATIVE_DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    /// Model variant, configs, step, seed and anything else the writer needs.
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            dtype: NATIVE_DTYPE.into(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + text.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(&text);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], file: &str) -> Result<Self> {
        let err = |field: &str, msg: String| FwdError::format(file, field, msg);
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err("magic", "not an FWDC checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(err("version", format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let text = bytes.get(12..12 + len).ok_or_else(|| err("header", "truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(text).map_err(|e| err("header", e.to_string()))?;
        if header.version != version {
            return Err(err("version", "header and prefix versions differ".into()));
        }
        let width = match header.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(err("dtype", format!("unknown dtype {other}"))),
        };
        let mut pos = 12 + len;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let chunk = bytes
                .get(pos..pos + n * width)
                .ok_or_else(|| err(&a.name, format!("payload truncated: array needs {} bytes", n * width)))?;
            let data: Vec<Real> = if width == 8 {
                chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8")) as Real).collect()
            } else {
                chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as Real).collect()
            };
            arrays.push((a.name.clone(), Tensor::new(a.shape.clone(), data)?));
            pos += n * width;
        }
        if pos != bytes.len() {
            return Err(err("payload", format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| FwdError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| FwdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FwdError::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}
