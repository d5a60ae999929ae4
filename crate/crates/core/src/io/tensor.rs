//! Flat little-endian `f32` tensor files with a JSON sidecar.
//!
//! A tensor `foo.bin` is accompanied by `foo.json` holding its shape (and,
//! for slice stacks, the axial slice indices). The binary payload is the
//! tensor in row-major order.

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{DatError, Result};

/// Sidecar metadata for one tensor file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub dtype: String,
    pub shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slice_indices: Option<Vec<usize>>,
}

fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

/// Writes `data` as little-endian `f32` plus its JSON sidecar.
pub fn write_tensor_f32(
    bin_path: &Path,
    data: ArrayViewD<'_, f32>,
    slice_indices: Option<&[usize]>,
) -> Result<()> {
    if let Some(parent) = bin_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let meta = TensorMeta {
        dtype: "f32".to_string(),
        shape: data.shape().to_vec(),
        slice_indices: slice_indices.map(|s| s.to_vec()),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| DatError::internal(format!("sidecar encode: {e}")))?;
    fs::write(sidecar_path(bin_path), json)?;

    let mut file = std::io::BufWriter::new(fs::File::create(bin_path)?);
    let owned;
    let slice = match data.as_slice() {
        Some(s) => s,
        None => {
            owned = data.to_owned();
            owned.as_slice().expect("owned arrays are contiguous")
        }
    };
    let mut bytes = Vec::with_capacity(slice.len() * 4);
    for v in slice {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor_f32`].
pub fn read_tensor_f32(bin_path: &Path) -> Result<(ArrayD<f32>, TensorMeta)> {
    let meta_text = fs::read_to_string(sidecar_path(bin_path))?;
    let meta: TensorMeta = serde_json::from_str(&meta_text)
        .map_err(|e| DatError::format(format!("bad tensor sidecar: {e}")))?;
    if meta.dtype != "f32" {
        return Err(DatError::format(format!(
            "unsupported tensor dtype {:?}",
            meta.dtype
        )));
    }
    let expected: usize = meta.shape.iter().product();
    let mut bytes = Vec::new();
    fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(DatError::format(format!(
            "tensor payload is {} bytes, expected {} for shape {:?}",
            bytes.len(),
            expected * 4,
            meta.shape
        )));
    }
    let mut values = Vec::with_capacity(expected);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
        .map_err(|e| DatError::format(format!("tensor shape mismatch: {e}")))?;
    Ok((arr, meta))
}
