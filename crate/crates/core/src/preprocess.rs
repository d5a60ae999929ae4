//! Slice preprocessing: soft background suppression via alpha blending,
//! adaptive binary masking with bilateral symmetrization, cohort-level ROI
//! agreement, buffer dilation, and the multi-level weight mask builder.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{LEDDSeries, ROIWeightMask, SliceImage, SubjectRecord, Zone};
use crate::error::{DatError, Result};

/// Fraction of slice masks that must agree for a pixel to join the striatum.
pub const ROI_AGREEMENT_NUM: usize = 13;
pub const ROI_AGREEMENT_DEN: usize = 20; // 13/20 = 0.65
/// Dilation iterations used to grow the buffer shell.
pub const BUFFER_DILATION_ITERS: usize = 4;

/// Tunables for the soft-masking denoise step.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Gaussian variance (pixels^2) of the background blur.
    pub sigma2: f32,
    /// Background attenuation factor in `[0, 1]`.
    pub gamma: f32,
    /// Percentile band (low, high) that ramps the content mask.
    pub alpha_band: (f32, f32),
    /// Whether the blend is applied to month-12 targets as well as
    /// screening conditions.
    pub apply_to_targets: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            sigma2: 4.0,
            gamma: 0.5,
            alpha_band: (0.3, 0.7),
            apply_to_targets: true,
        }
    }
}

/// Parameters of one soft-mask blend.
#[derive(Clone, Debug)]
pub struct SoftMaskParams {
    pub sigma2: f32,
    pub gamma: f32,
    pub alpha: Array2<f32>,
}

impl SoftMaskParams {
    pub fn validate(&self, side: (usize, usize)) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(DatError::validation("sigma2 must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(DatError::validation("gamma must lie in [0, 1]"));
        }
        if self.alpha.dim() != side {
            return Err(DatError::validation("alpha shape must match image"));
        }
        if self.alpha.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(DatError::validation("alpha values must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Binary content mask of one slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Array2<bool>,
}

impl BinaryMask {
    pub fn empty(side: usize) -> Self {
        BinaryMask {
            bits: Array2::from_elem((side, side), false),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Content mask plus a degeneracy flag for constant inputs.
#[derive(Clone, Debug)]
pub struct AlphaMask {
    pub alpha: Array2<f32>,
    /// True when the image had no dynamic range and the mask is all zeros.
    pub degenerate: bool,
}

// ---- Gaussian blur (reflective borders) -----------------------------------

fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    // Symmetric reflection (edge pixel repeated): -1 -> 0, n -> n-1.
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(sigma2: f32) -> Vec<f32> {
    let sigma = sigma2.sqrt();
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * sigma2)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with reflective border handling.
pub fn gaussian_blur(image: &Array2<f32>, sigma2: f32) -> Array2<f32> {
    let kernel = gaussian_kernel(sigma2);
    let radius = kernel.len() / 2;
    let (h, w) = image.dim();

    let mut tmp = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0f32;
            for (t, &kv) in kernel.iter().enumerate() {
                let jj = reflect_index(j as isize + t as isize - radius as isize, w);
                acc += kv * image[[i, jj]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for j in 0..w {
        for i in 0..h {
            let mut acc = 0.0f32;
            for (t, &kv) in kernel.iter().enumerate() {
                let ii = reflect_index(i as isize + t as isize - radius as isize, h);
                acc += kv * tmp[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

// ---- soft masking ----------------------------------------------------------

/// Alpha blend of the image with its attenuated blur:
/// `alpha .* I + (1 - alpha) .* (gamma * blur(I))`.
pub fn soft_mask_blend(image: &SliceImage, params: &SoftMaskParams) -> Result<SliceImage> {
    if image.pixels.iter().any(|v| !v.is_finite()) {
        return Err(DatError::validation("non-finite pixels in input"));
    }
    params.validate(image.pixels.dim())?;
    let blurred = gaussian_blur(&image.pixels, params.sigma2);
    let mut out = image.pixels.clone();
    ndarray::Zip::from(&mut out)
        .and(&params.alpha)
        .and(&blurred)
        .for_each(|o, &a, &bl| {
            *o = a * *o + (1.0 - a) * (params.gamma * bl);
        });
    Ok(SliceImage {
        pixels: out,
        slice_index: image.slice_index,
        normalized: false,
        norm_bounds: None,
    })
}

/// Smooth content mask: percentile ramp over the blurred, max-normalized image.
///
/// The ramp spans the `alpha_band` percentiles of the normalized intensities
/// with the band width floored at 0.05 so piecewise-constant images (for which
/// both percentiles coincide) still yield a usable 0/1 mask. Constant images
/// return an all-zero mask flagged as degenerate.
pub fn compute_alpha_mask(image: &SliceImage, cfg: &PreprocessConfig) -> Result<AlphaMask> {
    if image.pixels.iter().any(|v| !v.is_finite()) {
        return Err(DatError::validation("non-finite pixels in input"));
    }
    let blurred = gaussian_blur(&image.pixels, cfg.sigma2);
    let maxv = blurred.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let minv = blurred.iter().cloned().fold(f32::INFINITY, f32::min);
    if maxv <= minv || maxv == 0.0 {
        return Ok(AlphaMask {
            alpha: Array2::zeros(image.pixels.raw_dim()),
            degenerate: true,
        });
    }
    let normed = blurred.mapv(|v| v / maxv);
    let mut sorted: Vec<f32> = normed.iter().cloned().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile(&sorted, cfg.alpha_band.0);
    let hi = percentile(&sorted, cfg.alpha_band.1);
    let denom = (hi - lo).max(0.05);
    let alpha = normed.mapv(|v| ((v - lo) / denom).clamp(0.0, 1.0));
    Ok(AlphaMask {
        alpha,
        degenerate: false,
    })
}

pub(crate) fn percentile(sorted: &[f32], q: f32) -> f32 {
    let pos = q as f64 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = (pos - lo as f64) as f32;
    if lo + 1 < sorted.len() {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

// ---- binary masking ---------------------------------------------------------

/// Local-mean adaptive threshold: foreground where the pixel exceeds its
/// 31x31 neighborhood mean by 2% of the global dynamic range.
fn adaptive_threshold(image: &Array2<f32>) -> Array2<bool> {
    const WINDOW: usize = 31;
    let radius = WINDOW / 2;
    let (h, w) = image.dim();
    let minv = image.iter().cloned().fold(f32::INFINITY, f32::min);
    let maxv = image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let offset = 0.02 * (maxv - minv);

    // Separable box mean with reflective borders.
    let mut tmp = Array2::<f32>::zeros((h, w));
    let inv_win = 1.0 / WINDOW as f32;
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0f32;
            for t in 0..WINDOW {
                let jj = reflect_index(j as isize + t as isize - radius as isize, w);
                acc += image[[i, jj]];
            }
            tmp[[i, j]] = acc * inv_win;
        }
    }
    let mut out = Array2::<bool>::from_elem((h, w), false);
    for j in 0..w {
        for i in 0..h {
            let mut acc = 0.0f32;
            for t in 0..WINDOW {
                let ii = reflect_index(i as isize + t as isize - radius as isize, h);
                acc += tmp[[ii, j]];
            }
            let mean = acc * inv_win;
            out[[i, j]] = image[[i, j]] - mean > offset;
        }
    }
    out
}

/// One dilation step with the full 3x3 kernel, clipped at borders.
fn dilate_once(bits: &Array2<bool>) -> Array2<bool> {
    let (h, w) = bits.dim();
    let mut out = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            if !bits[[i, j]] {
                continue;
            }
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                        out[[ii as usize, jj as usize]] = true;
                    }
                }
            }
        }
    }
    out
}

/// One erosion step with the full 3x3 kernel; outside the image counts false.
fn erode_once(bits: &Array2<bool>) -> Array2<bool> {
    let (h, w) = bits.dim();
    let mut out = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let mut all = true;
            'scan: for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if ii < 0 || ii >= h as isize || jj < 0 || jj >= w as isize {
                        all = false;
                        break 'scan;
                    }
                    if !bits[[ii as usize, jj as usize]] {
                        all = false;
                        break 'scan;
                    }
                }
            }
            out[[i, j]] = all;
        }
    }
    out
}

/// Morphological dilation with the 3x3 ones kernel, repeated.
pub fn dilate(bits: &Array2<bool>, iterations: usize) -> Array2<bool> {
    let mut cur = bits.clone();
    for _ in 0..iterations {
        cur = dilate_once(&cur);
    }
    cur
}

fn opening(bits: &Array2<bool>) -> Array2<bool> {
    dilate_once(&erode_once(bits))
}

fn flip_horizontal<T: Clone>(grid: &Array2<T>) -> Array2<T> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h, w), |(i, j)| grid[[i, w - 1 - j]].clone())
}

/// Binary content mask with enforced bilateral symmetry.
///
/// The threshold+opening pipeline runs on both the original and the
/// horizontally flipped view; a pixel survives only if it is foreground in
/// both frames, i.e. the mask is intersected with its own mirror image. A
/// single off-axis blob therefore vanishes, while bilaterally symmetric
/// structure is preserved.
pub fn binary_mask(image: &SliceImage) -> Result<BinaryMask> {
    if image.pixels.iter().any(|v| !v.is_finite()) {
        return Err(DatError::validation("non-finite pixels in input"));
    }
    let view = opening(&adaptive_threshold(&image.pixels));
    let flipped_view = opening(&adaptive_threshold(&flip_horizontal(&image.pixels)));
    let mut bits = view;
    ndarray::Zip::from(&mut bits)
        .and(&flipped_view)
        .for_each(|a, &b| *a = *a && b);
    Ok(BinaryMask { bits })
}

// ---- aggregation & weighting -------------------------------------------------

/// Cohort agreement (per patient): keeps pixels where at least 65% of the
/// slice masks vote foreground. The comparison `count >= 0.65 * n` is done in
/// exact integer arithmetic as `20 * count >= 13 * n`.
pub fn aggregate_roi(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let n = masks.len();
    if n == 0 {
        return Err(DatError::validation("aggregate_roi needs at least one mask"));
    }
    let dim = masks[0].bits.dim();
    if masks.iter().any(|m| m.bits.dim() != dim) {
        return Err(DatError::validation("mask shapes differ"));
    }
    let mut counts = Array2::<usize>::zeros(dim);
    for m in masks {
        ndarray::Zip::from(&mut counts).and(&m.bits).for_each(|c, &b| {
            if b {
                *c += 1;
            }
        });
    }
    let bits = counts.mapv(|c| ROI_AGREEMENT_DEN * c >= ROI_AGREEMENT_NUM * n);
    Ok(BinaryMask { bits })
}

/// Buffer shell: 4-iteration 3x3 dilation of the striatum, minus the striatum.
pub fn dilate_buffer(striatum: &BinaryMask) -> BinaryMask {
    let grown = dilate(&striatum.bits, BUFFER_DILATION_ITERS);
    let mut bits = grown;
    ndarray::Zip::from(&mut bits)
        .and(&striatum.bits)
        .for_each(|b, &s| *b = *b && !s);
    BinaryMask { bits }
}

/// Assembles the three-level weight mask from disjoint striatum and buffer.
pub fn build_weight_mask(striatum: &BinaryMask, buffer: &BinaryMask) -> Result<ROIWeightMask> {
    if striatum.bits.dim() != buffer.bits.dim() {
        return Err(DatError::validation("mask shapes differ"));
    }
    let overlap = striatum
        .bits
        .iter()
        .zip(buffer.bits.iter())
        .any(|(&s, &b)| s && b);
    if overlap {
        return Err(DatError::validation("striatum and buffer overlap"));
    }
    let zones = ndarray::Zip::from(&striatum.bits)
        .and(&buffer.bits)
        .map_collect(|&s, &b| {
            if s {
                Zone::Striatum
            } else if b {
                Zone::Buffer
            } else {
                Zone::Background
            }
        });
    Ok(ROIWeightMask::from_zones(zones))
}

/// Elementwise `log(1 + dose)` on a raw series.
pub fn ledd_log_transform(series: &LEDDSeries) -> Result<LEDDSeries> {
    series.to_log1p()
}

// ---- record-level pipeline ----------------------------------------------------

/// The patient-level ROI mask from the screening stack (65 % majority vote
/// over all slice masks, then buffer dilation), replicated per slice.
pub fn compute_subject_masks(screening: &[SliceImage]) -> Result<Vec<ROIWeightMask>> {
    let slice_masks: Vec<BinaryMask> = screening
        .iter()
        .map(binary_mask)
        .collect::<Result<Vec<_>>>()?;
    let striatum = aggregate_roi(&slice_masks)?;
    let buffer = dilate_buffer(&striatum);
    let mask = build_weight_mask(&striatum, &buffer)?;
    Ok(vec![mask; screening.len()])
}

/// Applies soft masking to a record's slices and recomputes its ROI masks.
///
/// The blend runs on every screening slice and (configurably) every month-12
/// slice; the ROI is always derived from the preprocessed screening stack.
pub fn preprocess_record(record: &SubjectRecord, cfg: &PreprocessConfig) -> Result<SubjectRecord> {
    let blend = |img: &SliceImage| -> Result<SliceImage> {
        let alpha = compute_alpha_mask(img, cfg)?;
        let params = SoftMaskParams {
            sigma2: cfg.sigma2,
            gamma: cfg.gamma,
            alpha: alpha.alpha,
        };
        soft_mask_blend(img, &params)
    };
    let screening: Vec<SliceImage> = record
        .screening
        .iter()
        .map(&blend)
        .collect::<Result<Vec<_>>>()?;
    let month12: Vec<SliceImage> = if cfg.apply_to_targets {
        record
            .month12
            .iter()
            .map(&blend)
            .collect::<Result<Vec<_>>>()?
    } else {
        record.month12.clone()
    };
    let roi = compute_subject_masks(&screening)?;
    Ok(SubjectRecord {
        subject_id: record.subject_id.clone(),
        screening,
        month12,
        ledd: record.ledd.clone(),
        roi,
    })
}
