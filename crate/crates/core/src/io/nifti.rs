//! Minimal NIfTI-1 support: read 3-D volumes (optionally gzipped) into `f32`
//! and write `f32` volumes back out.
//!
//! Only single-file `.nii` / `.nii.gz` volumes with magic `n+1` are handled.
//! Scalar datatypes are converted to `f32` with `scl_slope`/`scl_inter`
//! applied. Volumes are returned indexed `[z, y, x]` (x fastest on disk, as
//! NIfTI stores it).

use flate2::read::GzDecoder;
use ndarray::Array3;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{DatError, Result};

const HEADER_SIZE: usize = 348;

/// A decoded volume plus the voxel spacing from the header.
#[derive(Clone, Debug)]
pub struct NiftiVolume {
    /// Indexed `[z, y, x]`.
    pub data: Array3<f32>,
    /// Spacing for (x, y, z) in header units.
    pub pixdim: [f32; 3],
}

fn read_i16(b: &[u8], at: usize, swap: bool) -> i16 {
    let raw = [b[at], b[at + 1]];
    if swap {
        i16::from_be_bytes(raw)
    } else {
        i16::from_le_bytes(raw)
    }
}

fn read_f32(b: &[u8], at: usize, swap: bool) -> f32 {
    let raw = [b[at], b[at + 1], b[at + 2], b[at + 3]];
    if swap {
        f32::from_be_bytes(raw)
    } else {
        f32::from_le_bytes(raw)
    }
}

/// Reads a `.nii` or `.nii.gz` volume.
pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let mut bytes = Vec::new();
    let file = fs::File::open(path)?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        std::io::BufReader::new(file).read_to_end(&mut bytes)?;
    }
    if bytes.len() < HEADER_SIZE {
        return Err(DatError::format("file shorter than a NIfTI-1 header"));
    }

    // sizeof_hdr doubles as the endianness sentinel.
    let size_le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let size_be = i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let swap = match (size_le, size_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(DatError::format("not a NIfTI-1 file (sizeof_hdr != 348)")),
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(DatError::format(format!(
            "unsupported NIfTI magic {:?} (need single-file n+1)",
            &magic[..3]
        )));
    }

    let ndim = read_i16(&bytes, 40, swap);
    if !(2..=4).contains(&ndim) {
        return Err(DatError::format(format!("unsupported dim[0] = {ndim}")));
    }
    let nx = read_i16(&bytes, 42, swap).max(1) as usize;
    let ny = read_i16(&bytes, 44, swap).max(1) as usize;
    let nz = read_i16(&bytes, 46, swap).max(1) as usize;
    if ndim == 4 && read_i16(&bytes, 48, swap) > 1 {
        return Err(DatError::format("4-D time series are not supported"));
    }
    let datatype = read_i16(&bytes, 70, swap);
    let vox_offset = read_f32(&bytes, 108, swap);
    let mut slope = read_f32(&bytes, 112, swap);
    let inter = read_f32(&bytes, 116, swap);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let pixdim = [
        read_f32(&bytes, 76 + 4, swap),
        read_f32(&bytes, 76 + 8, swap),
        read_f32(&bytes, 76 + 12, swap),
    ];

    let offset = vox_offset as usize;
    if offset < HEADER_SIZE || offset > bytes.len() {
        return Err(DatError::format(format!("bad vox_offset {vox_offset}")));
    }
    let n = nx * ny * nz;
    let payload = &bytes[offset..];

    let take = |width: usize| -> Result<&[u8]> {
        if payload.len() < n * width {
            return Err(DatError::format(format!(
                "payload holds {} bytes, need {} for {nx}x{ny}x{nz}",
                payload.len(),
                n * width
            )));
        }
        Ok(&payload[..n * width])
    };
    let scaled = |raw: f32| slope * raw + inter;
    let values: Vec<f32> = match datatype {
        2 => take(1)?.iter().map(|&v| scaled(v as f32)).collect(),
        4 => take(2)?
            .chunks_exact(2)
            .map(|c| {
                let raw = [c[0], c[1]];
                let v = if swap {
                    i16::from_be_bytes(raw)
                } else {
                    i16::from_le_bytes(raw)
                };
                scaled(v as f32)
            })
            .collect(),
        8 => take(4)?
            .chunks_exact(4)
            .map(|c| {
                let raw = [c[0], c[1], c[2], c[3]];
                let v = if swap {
                    i32::from_be_bytes(raw)
                } else {
                    i32::from_le_bytes(raw)
                };
                scaled(v as f32)
            })
            .collect(),
        16 => take(4)?
            .chunks_exact(4)
            .map(|c| {
                let raw = [c[0], c[1], c[2], c[3]];
                let v = if swap {
                    f32::from_be_bytes(raw)
                } else {
                    f32::from_le_bytes(raw)
                };
                scaled(v)
            })
            .collect(),
        64 => take(8)?
            .chunks_exact(8)
            .map(|c| {
                let raw: [u8; 8] = c.try_into().expect("chunk of 8");
                let v = if swap {
                    f64::from_be_bytes(raw)
                } else {
                    f64::from_le_bytes(raw)
                };
                scaled(v as f32)
            })
            .collect(),
        other => {
            return Err(DatError::format(format!(
                "unsupported NIfTI datatype code {other}"
            )))
        }
    };

    let data = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|e| DatError::internal(format!("volume shape: {e}")))?;
    Ok(NiftiVolume { data, pixdim })
}

/// Writes a `[z, y, x]` volume as a little-endian `f32` NIfTI-1 file.
pub fn write_nifti(path: &Path, volume: &Array3<f32>, pixdim: [f32; 3]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let (nz, ny, nx) = volume.dim();
    let mut header = vec![0u8; HEADER_SIZE + 4]; // +4: empty extension flag
    header[0..4].copy_from_slice(&348i32.to_le_bytes());

    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());

    put_i16(&mut header, 40, 3); // dim[0]
    put_i16(&mut header, 42, nx as i16);
    put_i16(&mut header, 44, ny as i16);
    put_i16(&mut header, 46, nz as i16);
    for k in 4..8 {
        put_i16(&mut header, 40 + 2 * k, 1);
    }
    put_i16(&mut header, 70, 16); // datatype: float32
    put_i16(&mut header, 72, 32); // bitpix
    put_f32(&mut header, 76, 1.0); // pixdim[0] (qfac)
    put_f32(&mut header, 80, pixdim[0]);
    put_f32(&mut header, 84, pixdim[1]);
    put_f32(&mut header, 88, pixdim[2]);
    put_f32(&mut header, 108, (HEADER_SIZE + 4) as f32); // vox_offset
    put_f32(&mut header, 112, 1.0); // scl_slope
    put_f32(&mut header, 116, 0.0); // scl_inter
    header[344..348].copy_from_slice(b"n+1\0");

    let mut out = Vec::with_capacity(header.len() + volume.len() * 4);
    out.extend_from_slice(&header);
    let std_layout = volume.as_standard_layout();
    for v in std_layout.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
