//! Single-file checkpoint container.
//!
//! Layout: magic `DFCK`, a `u32` version, a `u64` JSON header length, the
//! header itself, then every tensor as raw little-endian `f32` in header
//! order. The header carries arbitrary JSON metadata (model config, step
//! counters, schedule hash) plus the name and shape of each tensor. Tensor
//! groups use name prefixes: `model.`, `ema.`, `adam.m.`, `adam.v.`.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DatError, Result};
use crate::nn::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
}

/// Accumulates tensors and metadata, then writes the container.
pub struct CheckpointBuilder {
    meta: serde_json::Value,
    entries: Vec<(String, ArrayD<f32>)>,
    seen: HashMap<String, ()>,
}

impl CheckpointBuilder {
    pub fn new(meta: serde_json::Value) -> Self {
        CheckpointBuilder {
            meta,
            entries: Vec::new(),
            seen: HashMap::new(),
        }
    }

    pub fn add_tensor(&mut self, name: &str, tensor: ArrayD<f32>) -> Result<()> {
        if self.seen.insert(name.to_string(), ()).is_some() {
            return Err(DatError::internal(format!(
                "duplicate checkpoint tensor {name}"
            )));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    /// Adds every parameter of `ps` under `prefix` (e.g. `model.`).
    pub fn add_param_set(&mut self, prefix: &str, ps: &ParamSet<f32>) -> Result<()> {
        for (name, value) in ps.iter() {
            self.add_tensor(&format!("{prefix}{name}"), value.clone())?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let header = Header {
            meta: self.meta.clone(),
            entries: self
                .entries
                .iter()
                .map(|(name, t)| EntryMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| DatError::internal(format!("header encode: {e}")))?;

        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for (_, tensor) in &self.entries {
            let std_layout = tensor.as_standard_layout();
            let mut bytes = Vec::with_capacity(std_layout.len() * 4);
            for v in std_layout.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes)?;
        }
        file.flush()?;
        Ok(())
    }
}

/// A checkpoint read back from disk.
pub struct Checkpoint {
    pub meta: serde_json::Value,
    names: Vec<String>,
    tensors: HashMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DatError::format("not a checkpoint file (bad magic)"));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(DatError::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut len8 = [0u8; 8];
        file.read_exact(&mut len8)?;
        let header_len = u64::from_le_bytes(len8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| DatError::format(format!("bad checkpoint header: {e}")))?;

        let mut names = Vec::with_capacity(header.entries.len());
        let mut tensors = HashMap::with_capacity(header.entries.len());
        for entry in header.entries {
            let count: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; count * 4];
            file.read_exact(&mut bytes).map_err(|_| {
                DatError::format(format!("checkpoint truncated at tensor {}", entry.name))
            })?;
            let mut values = Vec::with_capacity(count);
            for c in bytes.chunks_exact(4) {
                values.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| DatError::format(format!("tensor {}: {e}", entry.name)))?;
            names.push(entry.name.clone());
            tensors.insert(entry.name, arr);
        }
        Ok(Checkpoint {
            meta: header.meta,
            names,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Copies `prefix`-scoped tensors into `ps` by name.
    ///
    /// Every parameter of `ps` must be present with a matching shape;
    /// leftover checkpoint tensors under the prefix are an error too, so a
    /// config/architecture mismatch cannot pass silently.
    pub fn load_param_set(&self, prefix: &str, ps: &mut ParamSet<f32>) -> Result<()> {
        let mut used = 0usize;
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let name = ps.name(id).to_string();
            let key = format!("{prefix}{name}");
            let tensor = self.tensors.get(&key).ok_or_else(|| {
                DatError::format(format!("checkpoint is missing tensor {key}"))
            })?;
            if tensor.shape() != ps.get(id).shape() {
                return Err(DatError::format(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    ps.get(id).shape()
                )));
            }
            ps.set(id, tensor.clone());
            used += 1;
        }
        let in_prefix = self
            .names
            .iter()
            .filter(|n| n.starts_with(prefix))
            .count();
        if in_prefix != used {
            return Err(DatError::format(format!(
                "checkpoint holds {in_prefix} tensors under {prefix:?}, model uses {used}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::tempdir;
    use ndarray::ArrayD;
    use serde_json::json;

    fn demo_params() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.add("w", ArrayD::from_elem(IxDyn(&[2, 3]), 1.5));
        ps.add("b", ArrayD::from_elem(IxDyn(&[3]), -0.25));
        ps
    }

    #[test]
    fn round_trips_params_and_meta() {
        let dir = tempdir();
        let path = dir.join("model.ckpt");
        let ps = demo_params();
        let mut b = CheckpointBuilder::new(json!({"step": 42, "hash": "abc"}));
        b.add_param_set("model.", &ps).unwrap();
        b.add_tensor("ema.w", ArrayD::from_elem(IxDyn(&[2, 3]), 9.0))
            .unwrap();
        b.write(&path).unwrap();

        let ck = Checkpoint::read(&path).unwrap();
        assert_eq!(ck.meta["step"], 42);
        assert_eq!(ck.tensor("model.b").unwrap()[[1]], -0.25);
        assert_eq!(ck.tensor("ema.w").unwrap()[[0, 0]], 9.0);

        let mut fresh = demo_params();
        let wid = fresh.id_of("w").unwrap();
        fresh.set(wid, ArrayD::zeros(IxDyn(&[2, 3])));
        ck.load_param_set("model.", &mut fresh).unwrap();
        assert_eq!(fresh.get(wid)[[1, 2]], 1.5);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn rejects_missing_and_mismatched_tensors() {
        let dir = tempdir();
        let path = dir.join("model.ckpt");
        let mut b = CheckpointBuilder::new(json!({}));
        b.add_tensor("model.w", ArrayD::from_elem(IxDyn(&[2, 3]), 1.0))
            .unwrap();
        b.write(&path).unwrap();
        let ck = Checkpoint::read(&path).unwrap();

        // Missing tensor (model.b absent).
        let mut ps = demo_params();
        assert!(ck.load_param_set("model.", &mut ps).is_err());

        // Shape mismatch.
        let mut ps = ParamSet::new();
        ps.add("w", ArrayD::<f32>::zeros(IxDyn(&[3, 3])));
        assert!(ck.load_param_set("model.", &mut ps).is_err());

        // Stale extra tensor under the prefix.
        let mut ps = ParamSet::new();
        ps.add("w", ArrayD::<f32>::zeros(IxDyn(&[2, 3])));
        let mut b = CheckpointBuilder::new(json!({}));
        b.add_tensor("model.w", ArrayD::from_elem(IxDyn(&[2, 3]), 1.0))
            .unwrap();
        b.add_tensor("model.stale", ArrayD::from_elem(IxDyn(&[1]), 1.0))
            .unwrap();
        b.write(&path).unwrap();
        let ck = Checkpoint::read(&path).unwrap();
        assert!(ck.load_param_set("model.", &mut ps).is_err());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn rejects_corrupt_containers() {
        let dir = tempdir();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(Checkpoint::read(&path).is_err());

        let mut b = CheckpointBuilder::new(json!({}));
        b.add_tensor("model.w", ArrayD::from_elem(IxDyn(&[4]), 1.0))
            .unwrap();
        b.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(Checkpoint::read(&path).is_err());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn duplicate_tensor_names_are_rejected_at_build_time() {
        let mut b = CheckpointBuilder::new(json!({}));
        b.add_tensor("x", ArrayD::from_elem(IxDyn(&[1]), 1.0)).unwrap();
        assert!(b.add_tensor("x", ArrayD::from_elem(IxDyn(&[1]), 2.0)).is_err());
    }
}
