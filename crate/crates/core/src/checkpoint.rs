//! `vapf-v1` checkpoints.
//!
//! ```text
//! "VAPFCKPT"  u32 version  u64 header_len  header (UTF-8 JSON)  f32 payloads
//! ```
//!
//! Integers and payload values are little-endian. Payload offsets are byte
//! offsets from the end of the header; tensors are stored back to back in
//! header order with no gaps.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VAPFCKPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a vapf checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
    #[error("checkpoint incompatible with model; missing: [{}]; unexpected: [{}]", .missing.join(", "), .unexpected.join(", "))]
    Incompatible {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: IndexMap<String, TensorEntry>,
    freeze_mask: Vec<String>,
    config: serde_json::Value,
    metrics: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, (Vec<usize>, Vec<f32>)>,
    pub freeze_mask: BTreeSet<String>,
    pub config: serde_json::Value,
    pub metrics: IndexMap<String, f64>,
}

impl Checkpoint {
    /// Snapshots `store`, narrowing every value to `f32`.
    pub fn from_store(store: &ParameterStore, config: serde_json::Value, metrics: IndexMap<String, f64>) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t)| {
                let data = t.data().iter().map(|&v| v as f32).collect();
                (name.to_string(), (t.shape().to_vec(), data))
            })
            .collect();
        Self {
            tensors,
            freeze_mask: store.freeze_mask().clone(),
            config,
            metrics,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut entries = IndexMap::new();
        for (name, (shape, data)) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: shape.clone(),
                    offset,
                    dtype: "f32".into(),
                },
            );
            offset += data.len() as u64 * 4;
        }
        let header = Header {
            tensors: entries,
            freeze_mask: self.freeze_mask.iter().cloned().collect(),
            config: self.config.clone(),
            metrics: self.metrics.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes and validates a checkpoint. Allocation is bounded by the input
    /// length: every size is checked against the bytes actually present.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let available = bytes.len() as u64;
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated {
                needed: PREAMBLE as u64,
                available,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&e| e <= available)
            .ok_or(CheckpointError::Truncated {
                needed: (PREAMBLE as u64).saturating_add(header_len),
                available,
            })? as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut expected_offset = 0u64;
        let mut tensors = IndexMap::with_capacity(header.tensors.len());
        for (name, entry) in header.tensors {
            let bad = |reason: String| CheckpointError::Tensor {
                name: name.clone(),
                reason,
            };
            if entry.dtype != "f32" {
                return Err(bad(format!("unsupported dtype `{}`", entry.dtype)));
            }
            if entry.shape.is_empty() || entry.shape.contains(&0) {
                return Err(bad(format!("invalid shape {:?}", entry.shape)));
            }
            if entry.offset != expected_offset {
                return Err(bad(format!("offset {} but expected {expected_offset}", entry.offset)));
            }
            let bytes_needed = entry
                .shape
                .iter()
                .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad("shape overflows".into()))?;
            let end = expected_offset
                .checked_add(bytes_needed)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or(CheckpointError::Truncated {
                    needed: header_end as u64 + expected_offset.saturating_add(bytes_needed),
                    available,
                })?;
            let data: Vec<f32> = payload[expected_offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
            expected_offset = end;
            tensors.insert(name, (entry.shape, data));
        }
        if expected_offset != payload.len() as u64 {
            return Err(CheckpointError::Header(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        let mut freeze_mask = BTreeSet::new();
        for name in header.freeze_mask {
            if !tensors.contains_key(&name) {
                return Err(CheckpointError::Header(format!("freeze mask names unknown tensor `{name}`")));
            }
            if !freeze_mask.insert(name.clone()) {
                return Err(CheckpointError::Header(format!("freeze mask repeats `{name}`")));
            }
        }
        if header.metrics.values().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Header("non-finite metric".into()));
        }
        Ok(Self {
            tensors,
            freeze_mask,
            config: header.config,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds a parameter store with the stored values and freeze mask.
    pub fn to_store(&self) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, (shape, data)) in &self.tensors {
            let t = Tensor::new(shape.clone(), data.iter().map(|&v| v as f64).collect())
                .expect("validated on decode");
            store.insert(name.clone(), t).expect("names are unique");
        }
        store
            .set_freeze_mask(self.freeze_mask.clone())
            .expect("validated on decode");
        store
    }

    /// Copies stored tensors into `store`. Every store name must be present
    /// in the checkpoint unless `fresh(name)` holds, and every checkpoint name
    /// must exist in the store. Returns the names that were loaded.
    pub fn load_into(&self, store: &mut ParameterStore, fresh: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let missing: Vec<String> = store
            .names()
            .filter(|n| !self.tensors.contains_key(*n) && !fresh(n))
            .map(str::to_string)
            .collect();
        let unexpected: Vec<String> = self
            .tensors
            .keys()
            .filter(|n| !store.contains(n))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(CheckpointError::Incompatible { missing, unexpected });
        }
        for (name, (shape, _)) in &self.tensors {
            let expected = store.get(name).expect("checked above").shape();
            if expected != shape.as_slice() {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    expected: expected.to_vec(),
                    found: shape.clone(),
                });
            }
        }
        let mut loaded = Vec::with_capacity(self.tensors.len());
        for (name, (shape, data)) in &self.tensors {
            let t = Tensor::new(shape.clone(), data.iter().map(|&v| v as f64).collect())
                .expect("validated on decode");
            store.assign(name, &t).expect("shape checked");
            loaded.push(name.clone());
        }
        Ok(loaded)
    }

    /// Little-endian bytes of one stored tensor.
    pub fn tensor_bytes(&self, name: &str) -> Option<Vec<u8>> {
        self.tensors
            .get(name)
            .map(|(_, d)| d.iter().flat_map(|v| v.to_le_bytes()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut store = ParameterStore::new();
        store
            .insert("a.weight", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.1, 3.0]).unwrap())
            .unwrap();
        store.insert("a.bias", Tensor::new(vec![2], vec![0.0, 1e-20]).unwrap()).unwrap();
        store.set_freeze_mask(["a.bias".to_string()].into()).unwrap();
        let mut metrics = IndexMap::new();
        metrics.insert("val_auc".to_string(), 0.8125);
        Checkpoint::from_store(&store, json!({"seed": 3}), metrics)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"VAPFCKPT");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let again = Checkpoint::from_store(&back.to_store(), back.config.clone(), back.metrics.clone());
        assert_eq!(again.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Magic)));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(2))));
        let mut bad = bytes.clone();
        bad[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan).is_err());
    }

    #[test]
    fn mismatched_store_lists_missing_names() {
        let ck = sample();
        let mut store = ParameterStore::new();
        store.insert("a.weight", Tensor::zeros(&[2, 2])).unwrap();
        store.insert("b.weight", Tensor::zeros(&[1])).unwrap();
        match ck.load_into(&mut store, |_| false) {
            Err(CheckpointError::Incompatible { missing, unexpected }) => {
                assert_eq!(missing, vec!["b.weight"]);
                assert_eq!(unexpected, vec!["a.bias"]);
            }
            other => panic!("{other:?}"),
        }
        let mut store = ParameterStore::new();
        store.insert("a.weight", Tensor::zeros(&[2, 2])).unwrap();
        store.insert("a.bias", Tensor::zeros(&[2])).unwrap();
        store.insert("p.prompt", Tensor::zeros(&[1, 2])).unwrap();
        let loaded = ck.load_into(&mut store, |n| n.ends_with("prompt")).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(store.get("a.weight").unwrap().at(0, 1), -2.5);
    }
}
