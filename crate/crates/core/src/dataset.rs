//! Shared data model: slices, dose series, ROI weight masks, subject records,
//! training pairs, validation, normalization, and cohort splitting.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DatError, Result};

/// Canonical slice side for real acquisitions.
pub const DEFAULT_SIDE: usize = 128;
/// Number of monthly LEDD entries per subject.
pub const LEDD_MONTHS: usize = 12;
/// Axial slice indices retained per subject, inclusive.
pub const SLICE_MIN: usize = 34;
pub const SLICE_MAX: usize = 47;
/// Slices per subject and per stage.
pub const SLICES_PER_SUBJECT: usize = SLICE_MAX - SLICE_MIN + 1;

/// Weight levels by zone.
pub const WEIGHT_STRIATUM: f32 = 1.0;
pub const WEIGHT_BUFFER: f32 = 0.8;
pub const WEIGHT_BACKGROUND: f32 = 0.4;

/// One axial DaTscan slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    /// Square intensity grid (row-major, arbitrary units unless normalized).
    pub pixels: Array2<f32>,
    /// Axial index within the retained range.
    pub slice_index: usize,
    /// True once mapped into `[-1, 1]`.
    pub normalized: bool,
    /// `(min, max)` of the raw slice captured at normalization time, kept so
    /// exported forecasts can be mapped back to acquisition units.
    pub norm_bounds: Option<(f32, f32)>,
}

impl SliceImage {
    pub fn new(pixels: Array2<f32>, slice_index: usize) -> Self {
        SliceImage {
            pixels,
            slice_index,
            normalized: false,
            norm_bounds: None,
        }
    }

    pub fn side(&self) -> usize {
        self.pixels.nrows()
    }

    /// Min-max normalization of this slice into `[-1, 1]`.
    ///
    /// A constant slice maps to all zeros. The original `(min, max)` is
    /// retained on the result for inverse mapping.
    pub fn normalize_unit(&self) -> SliceImage {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in self.pixels.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let pixels = if hi > lo {
            let scale = 2.0 / (hi - lo);
            self.pixels.mapv(|v| (v - lo) * scale - 1.0)
        } else {
            Array2::zeros(self.pixels.raw_dim())
        };
        SliceImage {
            pixels,
            slice_index: self.slice_index,
            normalized: true,
            norm_bounds: Some((lo, hi)),
        }
    }

    /// Inverse of [`SliceImage::normalize_unit`] using the stored bounds.
    pub fn denormalize(&self) -> Result<SliceImage> {
        let (lo, hi) = self.norm_bounds.ok_or_else(|| {
            DatError::validation("denormalize requires stored normalization bounds")
        })?;
        let pixels = self.pixels.mapv(|v| (v + 1.0) * 0.5 * (hi - lo) + lo);
        Ok(SliceImage {
            pixels,
            slice_index: self.slice_index,
            normalized: false,
            norm_bounds: None,
        })
    }
}

/// Scale of a dose series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseScale {
    Raw,
    Log1p,
}

/// Twelve months of levodopa-equivalent daily dose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LEDDSeries {
    pub doses: Vec<f32>,
    pub scale: DoseScale,
}

impl LEDDSeries {
    pub fn raw(doses: Vec<f32>) -> Self {
        LEDDSeries {
            doses,
            scale: DoseScale::Raw,
        }
    }

    /// Elementwise `log(1 + dose)`; requires a raw, nonnegative series.
    pub fn to_log1p(&self) -> Result<LEDDSeries> {
        if self.scale != DoseScale::Raw {
            return Err(DatError::validation("series already log-transformed"));
        }
        if self.doses.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(DatError::validation("negative or non-finite dose"));
        }
        Ok(LEDDSeries {
            doses: self.doses.iter().map(|&d| d.ln_1p()).collect(),
            scale: DoseScale::Log1p,
        })
    }
}

/// Zone labels of the ROI weight mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    Striatum,
    Buffer,
    Background,
}

impl Zone {
    pub fn weight(self) -> f32 {
        match self {
            Zone::Striatum => WEIGHT_STRIATUM,
            Zone::Buffer => WEIGHT_BUFFER,
            Zone::Background => WEIGHT_BACKGROUND,
        }
    }

    pub fn from_weight(w: f32) -> Option<Zone> {
        if w == WEIGHT_STRIATUM {
            Some(Zone::Striatum)
        } else if w == WEIGHT_BUFFER {
            Some(Zone::Buffer)
        } else if w == WEIGHT_BACKGROUND {
            Some(Zone::Background)
        } else {
            None
        }
    }
}

/// Per-pixel loss/metric weights with their zone labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ROIWeightMask {
    pub weights: Array2<f32>,
    pub zones: Array2<Zone>,
}

impl ROIWeightMask {
    /// Builds the mask from zone labels; weights follow the fixed mapping.
    pub fn from_zones(zones: Array2<Zone>) -> Self {
        let weights = zones.mapv(Zone::weight);
        ROIWeightMask { weights, zones }
    }

    /// Uniform background mask (used when no ROI is available).
    pub fn background(side: usize) -> Self {
        Self::from_zones(Array2::from_elem((side, side), Zone::Background))
    }

    pub fn side(&self) -> usize {
        self.weights.nrows()
    }

    /// Fraction of pixels labeled striatum.
    pub fn striatum_coverage(&self) -> f64 {
        let hits = self
            .zones
            .iter()
            .filter(|&&z| z == Zone::Striatum)
            .count();
        hits as f64 / self.zones.len() as f64
    }
}

/// One subject: screening and month-12 stacks, dose series, ROI masks.
#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub screening: Vec<SliceImage>,
    pub month12: Vec<SliceImage>,
    pub ledd: LEDDSeries,
    pub roi: Vec<ROIWeightMask>,
}

/// One (condition, target) training example.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub subject_id: String,
    pub condition: SliceImage,
    pub target: SliceImage,
    pub ledd: LEDDSeries,
    pub roi: ROIWeightMask,
    pub slice_index: usize,
}

/// A single invariant breach found by [`validate_record`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn check_stack(
    out: &mut Vec<Violation>,
    field: &str,
    slices: &[SliceImage],
    side: usize,
) {
    if slices.len() != SLICES_PER_SUBJECT {
        out.push(Violation {
            field: field.into(),
            rule: format!(
                "expected {} slices, found {}",
                SLICES_PER_SUBJECT,
                slices.len()
            ),
        });
    }
    let mut seen = [false; SLICE_MAX + 1];
    for s in slices {
        if s.slice_index < SLICE_MIN || s.slice_index > SLICE_MAX {
            out.push(Violation {
                field: format!("{field}[{}]", s.slice_index),
                rule: format!(
                    "slice_index outside [{SLICE_MIN}, {SLICE_MAX}]"
                ),
            });
        } else if std::mem::replace(&mut seen[s.slice_index], true) {
            out.push(Violation {
                field: format!("{field}[{}]", s.slice_index),
                rule: "duplicate slice_index".into(),
            });
        }
        if s.pixels.nrows() != side || s.pixels.ncols() != side {
            out.push(Violation {
                field: format!("{field}[{}]", s.slice_index),
                rule: format!(
                    "expected {side}x{side} pixels, found {}x{}",
                    s.pixels.nrows(),
                    s.pixels.ncols()
                ),
            });
        }
        if s.pixels.iter().any(|v| !v.is_finite()) {
            out.push(Violation {
                field: format!("{field}[{}]", s.slice_index),
                rule: "non-finite pixel values".into(),
            });
        }
        if s.normalized {
            let out_of_range = s.pixels.iter().any(|&v| !(-1.0..=1.0).contains(&v));
            if out_of_range {
                out.push(Violation {
                    field: format!("{field}[{}]", s.slice_index),
                    rule: "normalized slice has values outside [-1, 1]".into(),
                });
            }
        }
    }
}

/// Checks every documented invariant and returns the breaches as data.
///
/// `expected_side` defaults to [`DEFAULT_SIDE`]; synthetic cohorts may use a
/// smaller grid, in which case the caller passes that side explicitly.
pub fn validate_record(record: &SubjectRecord, expected_side: Option<usize>) -> Vec<Violation> {
    let side = expected_side.unwrap_or(DEFAULT_SIDE);
    let mut out = Vec::new();

    check_stack(&mut out, "screening", &record.screening, side);
    check_stack(&mut out, "month12", &record.month12, side);

    let mut idx_s: Vec<usize> = record.screening.iter().map(|s| s.slice_index).collect();
    let mut idx_m: Vec<usize> = record.month12.iter().map(|s| s.slice_index).collect();
    idx_s.sort_unstable();
    idx_m.sort_unstable();
    if idx_s != idx_m {
        out.push(Violation {
            field: "month12".into(),
            rule: "screening and month12 slice_index sets differ".into(),
        });
    }

    if record.ledd.doses.len() != LEDD_MONTHS {
        out.push(Violation {
            field: "ledd".into(),
            rule: format!(
                "expected {} doses, found {}",
                LEDD_MONTHS,
                record.ledd.doses.len()
            ),
        });
    }
    if record.ledd.scale == DoseScale::Raw
        && record.ledd.doses.iter().any(|&d| d < 0.0)
    {
        out.push(Violation {
            field: "ledd".into(),
            rule: "raw dose below zero".into(),
        });
    }
    if record.ledd.doses.iter().any(|d| !d.is_finite()) {
        out.push(Violation {
            field: "ledd".into(),
            rule: "non-finite dose".into(),
        });
    }

    if record.roi.len() != SLICES_PER_SUBJECT {
        out.push(Violation {
            field: "roi".into(),
            rule: format!(
                "expected {} masks, found {}",
                SLICES_PER_SUBJECT,
                record.roi.len()
            ),
        });
    }
    for (i, mask) in record.roi.iter().enumerate() {
        if mask.weights.nrows() != side || mask.weights.ncols() != side {
            out.push(Violation {
                field: format!("roi[{i}]"),
                rule: format!(
                    "expected {side}x{side} weights, found {}x{}",
                    mask.weights.nrows(),
                    mask.weights.ncols()
                ),
            });
        }
        if mask.weights.shape() != mask.zones.shape() {
            out.push(Violation {
                field: format!("roi[{i}]"),
                rule: "weights and zones shapes differ".into(),
            });
            continue;
        }
        let mismatched = mask
            .weights
            .iter()
            .zip(mask.zones.iter())
            .any(|(&w, &z)| w != z.weight());
        if mismatched {
            out.push(Violation {
                field: format!("roi[{i}]"),
                rule: "weights do not match zone labels".into(),
            });
        }
    }

    out
}

/// Expands a valid record into its per-slice training pairs.
///
/// Pairs come back sorted by slice index, with both images normalized to
/// `[-1, 1]` and the dose series log-transformed.
pub fn to_training_pairs(record: &SubjectRecord) -> Result<Vec<TrainingPair>> {
    let side = record
        .screening
        .first()
        .map(|s| s.side())
        .unwrap_or(DEFAULT_SIDE);
    let violations = validate_record(record, Some(side));
    if !violations.is_empty() {
        let summary = violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(DatError::validation(format!(
            "record {}: {summary}",
            record.subject_id
        )));
    }

    let ledd = if record.ledd.scale == DoseScale::Log1p {
        record.ledd.clone()
    } else {
        record.ledd.to_log1p()?
    };

    let mut order: Vec<usize> = (0..record.screening.len()).collect();
    order.sort_by_key(|&i| record.screening[i].slice_index);

    let mut pairs = Vec::with_capacity(order.len());
    for &i in &order {
        let cond = &record.screening[i];
        let target = record
            .month12
            .iter()
            .find(|m| m.slice_index == cond.slice_index)
            .expect("validated index sets match");
        pairs.push(TrainingPair {
            subject_id: record.subject_id.clone(),
            condition: cond.normalize_unit(),
            target: target.normalize_unit(),
            ledd: ledd.clone(),
            roi: record.roi[i].clone(),
            slice_index: cond.slice_index,
        });
    }
    Ok(pairs)
}

/// Split membership of one subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Subject-level split fractions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Deterministic subject-level assignment (never splits by slice).
///
/// Val and test sizes round down; the remainder trains. The shuffle is seeded,
/// so the same `(ids, seed)` always produces the same assignment regardless of
/// input order.
pub fn split_subjects(
    ids: &[String],
    fractions: SplitFractions,
    seed: u64,
) -> Vec<(String, Split)> {
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);

    let n = sorted.len();
    let n_val = (fractions.val * n as f64).floor() as usize;
    let n_test = (fractions.test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut out: Vec<(String, Split)> = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
