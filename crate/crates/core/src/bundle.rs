//! Binary tensor bundle used for prior, part-model and result checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4    magic "LSBN"
//! bytes 4..8    u32 format version (1)
//! bytes 8..16   u64 header length H
//! bytes 16..16+H  UTF-8 JSON header
//! remaining     tensor data, float32 little-endian, row-major
//! ```
//!
//! The header is `{"meta": {...}, "tensors": [{"name", "shape", "offset"}]}`
//! where `offset` is the byte offset of the tensor inside the data section.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LassieError, Result};

pub const MAGIC: &[u8; 4] = b"LSBN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory bundle: JSON metadata plus named float32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    pub meta: serde_json::Value,
    names: Vec<String>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorBundle {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            names: Vec::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// Stores `data` (rounded to f32) under `name`.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor `{name}` shape does not match its data"
        );
        if !self.tensors.contains_key(&name) {
            self.names.push(name.clone());
        }
        self.tensors
            .insert(name, (shape, data.iter().map(|&v| v as f32).collect()));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|(s, _)| s.as_slice())
    }

    pub fn get(&self, name: &str) -> Option<Vec<f64>> {
        self.tensors
            .get(name)
            .map(|(_, d)| d.iter().map(|&v| v as f64).collect())
    }

    pub fn require(&self, name: &str) -> Result<Vec<f64>> {
        self.get(name)
            .ok_or_else(|| LassieError::Format(format!("bundle has no tensor `{name}`")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.names.len());
        let mut offset = 0u64;
        for name in &self.names {
            let (shape, data) = &self.tensors[name];
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += 4 * data.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for name in &self.names {
            for v in &self.tensors[name].1 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(LassieError::Format("not a tensor bundle (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(LassieError::Format(format!(
                "unsupported bundle version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| LassieError::Format("truncated bundle header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut bundle = TensorBundle::new(header.meta);
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * count;
            if end > data.len() {
                return Err(LassieError::Format(format!(
                    "tensor `{}` runs past the end of the bundle",
                    entry.name
                )));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            bundle.names.push(entry.name.clone());
            bundle.tensors.insert(entry.name, (entry.shape, values));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(LassieError::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Rounds a value to the nearest f32, which is what a bundle stores.
pub fn snap(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_documented() {
        let mut b = TensorBundle::new(serde_json::json!({"kind": "test"}));
        b.insert("a", vec![2], &[1.0, -2.0]);
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LSBN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let tail = &bytes[16 + h..];
        assert_eq!(tail, [1.0f32.to_le_bytes(), (-2.0f32).to_le_bytes()].concat());
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(TensorBundle::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut b = TensorBundle::new(serde_json::json!({"n": values.len()}));
            b.insert("first", vec![split], &values[..split]);
            b.insert("second", vec![values.len() - split], &values[split..]);
            let back = TensorBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back, &b);
            let joined: Vec<f64> = [back.get("first").unwrap(), back.get("second").unwrap()].concat();
            for (x, y) in joined.iter().zip(&values) {
                prop_assert_eq!(*x, snap(*y));
            }
        }
    }
}
