//! Self-describing binary container shared by datasets, checkpoints and probe dumps.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic, identifies the payload kind |
//! | 8 | `u64` length `L` of the header |
//! | `L` | UTF-8 JSON header `{"meta": {...}, "blobs": [{"name", "dtype", "shape"}, ...]}` |
//! | ... | blob payloads, concatenated in header order, each `prod(shape)` values |
//!
//! `dtype` is `"f32"` or `"f64"` (IEEE-754 little-endian).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"SYSIDDS1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYSIDCK1";
pub const PROBE_MAGIC: &[u8; 8] = b"SYSIDPR1";

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl BlobData {
    fn dtype(&self) -> &'static str {
        match self {
            BlobData::F32(_) => "f32",
            BlobData::F64(_) => "f64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            BlobData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            BlobData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    blobs: Vec<BlobHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub blobs: Vec<Blob>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, blobs: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: BlobData) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "blob `{name}` has {} values for shape {shape:?}",
                data.len()
            )));
        }
        self.blobs.push(Blob {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing blob `{name}`")))
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            blobs: self
                .blobs
                .iter()
                .map(|b| BlobHeader {
                    name: b.name.clone(),
                    dtype: b.data.dtype().into(),
                    shape: b.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blobs {
            match &b.data {
                BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Corrupt("file shorter than the container preamble".into()));
        }
        if &bytes[..8] != magic {
            return Err(Error::Corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            )));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(Error::Corrupt(format!(
                "header claims {len} bytes but only {} remain",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..len])
            .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
        let mut rest = &body[len..];
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for h in header.blobs {
            let count: usize = h.shape.iter().product();
            let width = match h.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Corrupt(format!("blob `{}` has unknown dtype {other}", h.name))),
            };
            let need = count * width;
            if rest.len() < need {
                return Err(Error::Truncated {
                    name: h.name,
                    expected: need,
                    found: rest.len(),
                });
            }
            let (raw, tail) = rest.split_at(need);
            rest = tail;
            let data = if width == 4 {
                BlobData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                BlobData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            };
            blobs.push(Blob {
                name: h.name,
                shape: h.shape,
                data,
            });
        }
        if !rest.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes after the last blob", rest.len())));
        }
        Ok(Container {
            meta: header.meta,
            blobs,
        })
    }

    pub fn write(&self, path: &Path, magic: &[u8; 8]) -> Result<()> {
        let bytes = self.to_bytes(magic)?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, magic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"k": 1}));
        c.push("a", &[2, 2], BlobData::F32(vec![1.0, -2.5, f32::MIN_POSITIVE, 4.0]))
            .unwrap();
        c.push("b", &[3], BlobData::F64(vec![0.1, 1e300, -0.0])).unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes(DATASET_MAGIC).unwrap();
        let back = Container::from_bytes(&bytes, DATASET_MAGIC).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(DATASET_MAGIC).unwrap(), bytes);
    }

    #[test]
    fn truncation_names_the_blob() {
        let bytes = sample().to_bytes(DATASET_MAGIC).unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3], DATASET_MAGIC).unwrap_err();
        assert!(matches!(&err, Error::Truncated { name, .. } if name == "b"), "{err}");
        assert!(err.to_string().contains('b'));
    }

    #[test]
    fn wrong_magic_and_bad_shapes() {
        let bytes = sample().to_bytes(DATASET_MAGIC).unwrap();
        assert!(Container::from_bytes(&bytes, CHECKPOINT_MAGIC).is_err());
        let mut c = Container::new(serde_json::Value::Null);
        assert!(c.push("x", &[3], BlobData::F32(vec![1.0])).is_err());
    }
}
