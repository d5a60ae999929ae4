//! Cohort persistence: a JSON manifest plus per-subject tensor payloads and
//! mask PNGs, and the LEDD CSV importer.
//!
//! Layout under the cohort root:
//!
//! ```text
//! manifest.json
//! subjects/<id>/screening.bin|.json   # (S, H, W) + slice indices
//! subjects/<id>/month12.bin|.json
//! subjects/<id>/roi.bin|.json         # per-slice weight maps
//! subjects/<id>/mask_<idx>.png        # zone labels, one per slice
//! subjects/<id>/ledd.json
//! ```

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::dataset::{
    validate_record, LEDDSeries, ROIWeightMask, SliceImage, Split, SubjectRecord, Zone,
    LEDD_MONTHS,
};
use crate::error::{DatError, Result};
use crate::io::png::{read_zone_png, write_zone_png};
use crate::io::tensor::{read_tensor_f32, write_tensor_f32};

pub const MANIFEST_VERSION: u32 = 1;

/// Top-level cohort description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortManifest {
    pub format_version: u32,
    /// Square slice side length in pixels.
    pub side: usize,
    pub months: usize,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Directory relative to the cohort root.
    pub path: String,
    pub split: Split,
}

fn stack_slices(slices: &[SliceImage]) -> Result<(Array3<f32>, Vec<usize>)> {
    let (h, w) = slices
        .first()
        .map(|s| s.pixels.dim())
        .ok_or_else(|| DatError::validation("empty slice stack"))?;
    let mut stack = Array3::<f32>::zeros((slices.len(), h, w));
    let mut indices = Vec::with_capacity(slices.len());
    for (i, s) in slices.iter().enumerate() {
        if s.pixels.dim() != (h, w) {
            return Err(DatError::validation("ragged slice stack"));
        }
        stack.index_axis_mut(ndarray::Axis(0), i).assign(&s.pixels);
        indices.push(s.slice_index);
    }
    Ok((stack, indices))
}

fn save_subject(dir: &Path, record: &SubjectRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (scr, scr_idx) = stack_slices(&record.screening)?;
    write_tensor_f32(&dir.join("screening.bin"), scr.view().into_dyn(), Some(&scr_idx))?;
    let (m12, m12_idx) = stack_slices(&record.month12)?;
    write_tensor_f32(&dir.join("month12.bin"), m12.view().into_dyn(), Some(&m12_idx))?;

    let side = scr.shape()[1];
    let mut roi = Array3::<f32>::zeros((record.roi.len(), side, side));
    for (i, mask) in record.roi.iter().enumerate() {
        roi.index_axis_mut(ndarray::Axis(0), i).assign(&mask.weights);
        write_zone_png(&dir.join(format!("mask_{}.png", scr_idx[i])), &mask.zones)?;
    }
    write_tensor_f32(&dir.join("roi.bin"), roi.view().into_dyn(), Some(&scr_idx))?;

    let ledd = serde_json::to_string_pretty(&record.ledd)
        .map_err(|e| DatError::internal(format!("ledd encode: {e}")))?;
    fs::write(dir.join("ledd.json"), ledd)?;
    Ok(())
}

/// Persists a cohort: every record is validated first, then written under
/// `subjects/<id>` with the manifest at the root. `splits` must assign every
/// subject.
pub fn save_cohort(
    dir: &Path,
    records: &[SubjectRecord],
    splits: &HashMap<String, Split>,
) -> Result<CohortManifest> {
    if records.is_empty() {
        return Err(DatError::validation("refusing to save an empty cohort"));
    }
    let side = records[0]
        .screening
        .first()
        .map(|s| s.pixels.nrows())
        .ok_or_else(|| DatError::validation("first record has no screening slices"))?;

    let mut entries = Vec::with_capacity(records.len());
    for record in records {
        let violations = validate_record(record, Some(side));
        if !violations.is_empty() {
            let summary: Vec<String> = violations
                .iter()
                .take(3)
                .map(|v| format!("{}: {}", v.field, v.rule))
                .collect();
            return Err(DatError::validation(format!(
                "subject {} fails validation ({} issues): {}",
                record.subject_id,
                violations.len(),
                summary.join("; ")
            )));
        }
        let split = splits.get(&record.subject_id).ok_or_else(|| {
            DatError::config(format!("no split assigned to {}", record.subject_id))
        })?;
        let rel = format!("subjects/{}", record.subject_id);
        save_subject(&dir.join(&rel), record)?;
        entries.push(SubjectEntry {
            id: record.subject_id.clone(),
            path: rel,
            split: *split,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = CohortManifest {
        format_version: MANIFEST_VERSION,
        side,
        months: LEDD_MONTHS,
        subjects: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DatError::internal(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

fn load_stack(dir: &Path, stem: &str) -> Result<Vec<SliceImage>> {
    let (arr, meta) = read_tensor_f32(&dir.join(format!("{stem}.bin")))?;
    if arr.ndim() != 3 {
        return Err(DatError::format(format!("{stem} stack must be 3-D")));
    }
    let indices = meta
        .slice_indices
        .ok_or_else(|| DatError::format(format!("{stem} sidecar lacks slice indices")))?;
    if indices.len() != arr.shape()[0] {
        return Err(DatError::format(format!(
            "{stem}: {} slice indices for {} slices",
            indices.len(),
            arr.shape()[0]
        )));
    }
    let arr = arr
        .into_dimensionality::<ndarray::Ix3>()
        .expect("checked ndim above");
    Ok(indices
        .into_iter()
        .enumerate()
        .map(|(i, idx)| SliceImage::new(arr.index_axis(ndarray::Axis(0), i).to_owned(), idx))
        .collect())
}

/// Loads one subject directory written by [`save_cohort`].
pub fn load_subject(dir: &Path, subject_id: &str) -> Result<SubjectRecord> {
    let screening = load_stack(dir, "screening")?;
    let month12 = load_stack(dir, "month12")?;

    let (roi_arr, roi_meta) = read_tensor_f32(&dir.join("roi.bin"))?;
    let roi_arr = roi_arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| DatError::format("roi stack must be 3-D"))?;
    let indices = roi_meta
        .slice_indices
        .ok_or_else(|| DatError::format("roi sidecar lacks slice indices"))?;
    let mut roi = Vec::with_capacity(indices.len());
    for (i, idx) in indices.iter().enumerate() {
        let zones: Array2<Zone> = read_zone_png(&dir.join(format!("mask_{idx}.png")))?;
        let mask = ROIWeightMask::from_zones(zones);
        let weights = roi_arr.index_axis(ndarray::Axis(0), i);
        if mask.weights != weights {
            return Err(DatError::format(format!(
                "mask_{idx}.png disagrees with roi.bin weights"
            )));
        }
        roi.push(mask);
    }

    let ledd_text = fs::read_to_string(dir.join("ledd.json"))?;
    let ledd: LEDDSeries = serde_json::from_str(&ledd_text)
        .map_err(|e| DatError::format(format!("bad ledd.json: {e}")))?;

    Ok(SubjectRecord {
        subject_id: subject_id.to_string(),
        screening,
        month12,
        ledd,
        roi,
    })
}

/// Loads a full cohort; subjects come back in manifest order.
pub fn load_cohort(dir: &Path) -> Result<(Vec<SubjectRecord>, CohortManifest)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CohortManifest = serde_json::from_str(&text)
        .map_err(|e| DatError::format(format!("bad manifest: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(DatError::format(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let mut records = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        records.push(load_subject(&dir.join(&entry.path), &entry.id)?);
    }
    Ok((records, manifest))
}

/// Imports dose series from a CSV with header
/// `subject_id,month_1,...,month_12`. Gaps, negatives, non-finite values, and
/// duplicate ids are rejected.
pub fn read_ledd_csv(path: &Path) -> Result<Vec<(String, LEDDSeries)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatError::format(format!("csv open: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| DatError::format(format!("csv header: {e}")))?
        .clone();
    let mut expected = vec!["subject_id".to_string()];
    expected.extend((1..=LEDD_MONTHS).map(|m| format!("month_{m}")));
    let got: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    if got != expected {
        return Err(DatError::format(format!(
            "LEDD csv header must be {:?}, got {:?}",
            expected.join(","),
            got.join(",")
        )));
    }

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| DatError::format(format!("csv row: {e}")))?;
        if row.len() != LEDD_MONTHS + 1 {
            return Err(DatError::format(format!(
                "row {}: expected {} fields, got {}",
                line + 2,
                LEDD_MONTHS + 1,
                row.len()
            )));
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(DatError::validation(format!("row {}: empty subject id", line + 2)));
        }
        if !seen.insert(id.clone()) {
            return Err(DatError::validation(format!("duplicate subject id {id}")));
        }
        let mut doses = Vec::with_capacity(LEDD_MONTHS);
        for m in 1..=LEDD_MONTHS {
            let cell = &row[m];
            if cell.is_empty() {
                return Err(DatError::validation(format!(
                    "subject {id}: month_{m} is missing; gaps are not supported"
                )));
            }
            let v: f32 = cell.parse().map_err(|_| {
                DatError::format(format!("subject {id}: month_{m} = {cell:?} is not a number"))
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(DatError::validation(format!(
                    "subject {id}: month_{m} = {v} must be a finite nonnegative dose"
                )));
            }
            doses.push(v);
        }
        out.push((id, LEDDSeries::raw(doses)));
    }
    Ok(out)
}
