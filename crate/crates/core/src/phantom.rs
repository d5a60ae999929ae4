//! Real-volume ingestion (axial slice-range extraction plus LEDD pairing)
//! and a deterministic synthetic phantom cohort generator.
//!
//! The phantom embeds a known closed-form treatment→decay law so the whole
//! forecasting pipeline can be validated at desk scale: two mirrored
//! elliptical "striata" (a hard plateau with a smooth falloff skirt) sit on
//! spatially correlated background noise; the month-12 stack is derived from
//! the screening stack by dimming and shrinking each blob as a monotone
//! function of the subject's mean log LEDD dose (higher sustained dose ⇒
//! less decay), with a configurable left/right asymmetry.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    validate_record, LEDDSeries, ROIWeightMask, SliceImage, SubjectRecord, LEDD_MONTHS,
    SLICES_PER_SUBJECT, SLICE_MAX, SLICE_MIN,
};
use crate::error::{DatError, Result};
use crate::preprocess::{build_weight_mask, dilate_buffer, gaussian_blur, BinaryMask};
use crate::util::derive_seed;

/// Steepness of the blob skirt: intensity falls as `exp(-FEATHER * (q - 1))`
/// outside the plateau, where `q` is the elliptical quadratic form.
const FEATHER: f32 = 6.0;
/// Constant background uptake floor (keeps pixels positive under noise).
const BACKGROUND_OFFSET: f32 = 0.08;
/// Fraction of the slice area covered by one blob plateau at `roi_scale = 1`
/// is `2 * pi * AXIS_A_FRAC * AXIS_B_FRAC` for the pair, about 10%.
const AXIS_A_FRAC: f32 = 0.148;
const AXIS_B_FRAC: f32 = 0.108;
/// Half of the decay effect is expressed as blob shrinkage.
const SHRINK_SHARE: f32 = 0.5;
/// Variance of the Gaussian smoothing applied to the background noise.
const NOISE_SIGMA2: f32 = 2.25;

/// Parameters of the synthetic cohort.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_subjects: usize,
    /// Left/right uptake-loss imbalance in `[0, 1]`: the right hemisphere's
    /// decay effect is scaled by `1 - asymmetry` (1 ⇒ only the left decays).
    pub asymmetry: f32,
    /// Fractional annual uptake loss per unit mean log-dose deficit.
    pub decay_gain: f32,
    /// Standard deviation of the injected (spatially correlated) noise.
    pub noise_std: f32,
    /// Square slice side in pixels.
    pub side: usize,
    /// Multiplies the blob semi-axes; 1.0 targets ~10% striatum coverage.
    pub roi_scale: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_subjects: 20,
            asymmetry: 0.4,
            decay_gain: 0.35,
            noise_std: 0.015,
            side: 64,
            roi_scale: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 1 {
            return Err(DatError::config("phantom: n_subjects must be >= 1"));
        }
        for (name, v) in [
            ("asymmetry", self.asymmetry),
            ("decay_gain", self.decay_gain),
            ("noise_std", self.noise_std),
            ("roi_scale", self.roi_scale),
        ] {
            if !v.is_finite() {
                return Err(DatError::config(format!("phantom: {name} must be finite")));
            }
        }
        if !(0.0..=1.0).contains(&self.asymmetry) {
            return Err(DatError::config("phantom: asymmetry must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.decay_gain) {
            return Err(DatError::config("phantom: decay_gain must be in [0, 1]"));
        }
        if self.noise_std < 0.0 {
            return Err(DatError::config("phantom: noise_std must be >= 0"));
        }
        if !(0.5..=1.5).contains(&self.roi_scale) {
            return Err(DatError::config("phantom: roi_scale must be in [0.5, 1.5]"));
        }
        if self.side < 48 {
            return Err(DatError::config("phantom: side must be >= 48"));
        }
        Ok(())
    }
}

/// Per-subject latent parameters, re-derivable from `(spec.seed, index)`.
struct SubjectParams {
    severity: f32,
    amplitude: f32,
    doses: Vec<f32>,
    cy: f32,
    cx_left: f32,
    axis_a: f32,
    axis_b: f32,
}

fn draw_params(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> SubjectParams {
    let severity = rng.random_range(0.8f32..=1.2);
    let amplitude = rng.random_range(0.9f32..=1.1);
    // Log-uniform over [0, 1200] so the mean log dose (the decay law's
    // input) is spread evenly instead of saturating at high doses.
    let mean_dose = (rng.random_range(0.0f32..=1201.0f32.ln())).exp() - 1.0;
    let doses: Vec<f32> = (0..LEDD_MONTHS)
        .map(|_| mean_dose * rng.random_range(0.9f32..=1.1))
        .collect();
    let s = spec.side as f32;
    let cy = s / 2.0 + rng.random_range(-s / 32.0..=s / 32.0);
    let cx_left = 0.28 * s + rng.random_range(-s / 42.0..=s / 42.0);
    let axis_a = AXIS_A_FRAC * s * spec.roi_scale * rng.random_range(0.92f32..=1.08);
    let axis_b = AXIS_B_FRAC * s * spec.roi_scale * rng.random_range(0.92f32..=1.08);
    SubjectParams {
        severity,
        amplitude,
        doses,
        cy,
        cx_left,
        axis_a,
        axis_b,
    }
}

/// Smoothed white noise rescaled to an exact standard deviation.
fn correlated_noise(side: usize, std: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    if std == 0.0 {
        return Array2::zeros((side, side));
    }
    let white = Array2::from_shape_simple_fn((side, side), || rng.sample::<f32, _>(StandardNormal));
    let smooth = gaussian_blur(&white, NOISE_SIGMA2);
    let mean = f64::from(smooth.sum()) / (side * side) as f64;
    let var = smooth
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / (side * side) as f64;
    if var <= 0.0 {
        return Array2::zeros((side, side));
    }
    let scale = (f64::from(std) / var.sqrt()) as f32;
    smooth.mapv(|v| (v - mean as f32) * scale)
}

/// Elliptical quadratic form `((x-cx)/a)^2 + ((y-cy)/b)^2`.
fn quad(i: usize, j: usize, cx: f32, cy: f32, a: f32, b: f32) -> f32 {
    let dx = (j as f32 - cx) / a;
    let dy = (i as f32 - cy) / b;
    dx * dx + dy * dy
}

/// Plateau-with-skirt blob profile evaluated at quadratic coordinate `q`,
/// shrunk by the radius factor `rho` (axes scale by `rho`, so `q` rescales
/// by `rho^2`).
fn blob(q: f32, rho: f32) -> f32 {
    let q = q / (rho * rho);
    if q <= 1.0 {
        1.0
    } else {
        (-FEATHER * (q - 1.0)).exp()
    }
}

/// Per-slice intensity modulation across the axial range (ends dimmer).
fn slice_gain(slice_index: usize) -> f32 {
    let rel = (slice_index as f32 - (SLICE_MIN + SLICE_MAX) as f32 / 2.0) / 6.5;
    1.0 - 0.15 * rel * rel
}

/// The closed-form decay law: per-hemisphere dim factor `f` and radius
/// factor `rho` given the mean log dose `m`.
///
/// `effect = decay_gain * severity * asym / (1 + m)`; `f = 1 - effect`;
/// `rho = 1 - SHRINK_SHARE * effect`. Both equal exactly 1.0 when
/// `decay_gain == 0`.
fn decay_factors(spec: &PhantomSpec, severity: f32, mean_log_dose: f32, asym: f32) -> (f32, f32) {
    let effect = (spec.decay_gain * severity * asym / (1.0 + mean_log_dose)).clamp(0.0, 1.0);
    (1.0 - effect, 1.0 - SHRINK_SHARE * effect)
}

struct RenderSpec {
    dim_left: f32,
    rho_left: f32,
    dim_right: f32,
    rho_right: f32,
}

/// One generated subject plus its noise-free oracle forecast.
pub struct PhantomSubject {
    pub record: SubjectRecord,
    /// Month-12 slices rendered with the exact decay law but without the
    /// fresh injected noise: the best forecast any model could make.
    pub oracle: Vec<SliceImage>,
}

fn render_slice(
    spec: &PhantomSpec,
    p: &SubjectParams,
    slice_index: usize,
    base: &Array2<f32>,
    r: &RenderSpec,
) -> Array2<f32> {
    let side = spec.side;
    let cx_right = (side - 1) as f32 - p.cx_left;
    let gain = p.amplitude * slice_gain(slice_index);
    Array2::from_shape_fn((side, side), |(i, j)| {
        let ql = quad(i, j, p.cx_left, p.cy, p.axis_a, p.axis_b);
        let qr = quad(i, j, cx_right, p.cy, p.axis_a, p.axis_b);
        let signal = gain * (r.dim_left * blob(ql, r.rho_left) + r.dim_right * blob(qr, r.rho_right));
        (base[[i, j]] + signal).max(0.0)
    })
}

fn ground_truth_mask(spec: &PhantomSpec, p: &SubjectParams) -> Result<ROIWeightMask> {
    let side = spec.side;
    let cx_right = (side - 1) as f32 - p.cx_left;
    let bits = Array2::from_shape_fn((side, side), |(i, j)| {
        quad(i, j, p.cx_left, p.cy, p.axis_a, p.axis_b) <= 1.0
            || quad(i, j, cx_right, p.cy, p.axis_a, p.axis_b) <= 1.0
    });
    let striatum = BinaryMask { bits };
    let buffer = dilate_buffer(&striatum);
    build_weight_mask(&striatum, &buffer)
}

/// Generates one subject deterministically from `(spec.seed, index)`.
pub fn generate_subject(spec: &PhantomSpec, index: usize) -> Result<PhantomSubject> {
    spec.validate()?;
    if index >= spec.n_subjects {
        return Err(DatError::config(format!(
            "phantom subject index {index} out of range (n_subjects = {})",
            spec.n_subjects
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xF0, index as u64]));
    let p = draw_params(spec, &mut rng);

    let ledd = LEDDSeries::raw(p.doses.clone());
    let mean_log_dose =
        p.doses.iter().map(|&d| d.ln_1p()).sum::<f32>() / p.doses.len() as f32;
    let (dim_l, rho_l) = decay_factors(spec, p.severity, mean_log_dose, 1.0);
    let (dim_r, rho_r) = decay_factors(
        spec,
        p.severity,
        mean_log_dose,
        1.0 - spec.asymmetry,
    );
    let identity = RenderSpec {
        dim_left: 1.0,
        rho_left: 1.0,
        dim_right: 1.0,
        rho_right: 1.0,
    };
    let decayed = RenderSpec {
        dim_left: dim_l,
        rho_left: rho_l,
        dim_right: dim_r,
        rho_right: rho_r,
    };

    let mask = ground_truth_mask(spec, &p)?;
    let mut screening = Vec::with_capacity(SLICES_PER_SUBJECT);
    let mut month12 = Vec::with_capacity(SLICES_PER_SUBJECT);
    let mut oracle = Vec::with_capacity(SLICES_PER_SUBJECT);
    for k in SLICE_MIN..=SLICE_MAX {
        let background = correlated_noise(spec.side, spec.noise_std, &mut rng)
            .mapv(|v| v + BACKGROUND_OFFSET);
        let fresh = correlated_noise(spec.side, spec.noise_std, &mut rng);
        let month_base = &background + &fresh;
        screening.push(SliceImage::new(
            render_slice(spec, &p, k, &background, &identity),
            k,
        ));
        month12.push(SliceImage::new(
            render_slice(spec, &p, k, &month_base, &decayed),
            k,
        ));
        oracle.push(SliceImage::new(
            render_slice(spec, &p, k, &background, &decayed),
            k,
        ));
    }

    Ok(PhantomSubject {
        record: SubjectRecord {
            subject_id: format!("phantom-{index:04}"),
            screening,
            month12,
            ledd,
            roi: vec![mask; SLICES_PER_SUBJECT],
        },
        oracle,
    })
}

/// Generates the full cohort; subject `i` depends only on `(spec.seed, i)`,
/// so generation could run in parallel without changing the output.
pub fn generate_phantom_cohort(spec: &PhantomSpec) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    (0..spec.n_subjects)
        .map(|i| generate_subject(spec, i).map(|s| s.record))
        .collect()
}

/// The perfect-forecast oracle: re-derives the subject's latent parameters
/// from its id, checks that the record really was produced by `spec` (the
/// regenerated screening stack must match bit-exactly), and returns the
/// noise-free decayed month-12 slices.
pub fn phantom_oracle_forecast(
    spec: &PhantomSpec,
    record: &SubjectRecord,
) -> Result<Vec<SliceImage>> {
    let index = record
        .subject_id
        .strip_prefix("phantom-")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| {
            DatError::validation(format!(
                "subject '{}' is not a phantom subject",
                record.subject_id
            ))
        })?;
    let regen = generate_subject(spec, index)?;
    let matches = regen.record.screening.len() == record.screening.len()
        && regen
            .record
            .screening
            .iter()
            .zip(&record.screening)
            .all(|(a, b)| a.slice_index == b.slice_index && a.pixels == b.pixels)
        && regen.record.ledd.doses == record.ledd.doses;
    if !matches {
        return Err(DatError::validation(format!(
            "record '{}' was not generated by this phantom spec",
            record.subject_id
        )));
    }
    Ok(regen.oracle)
}

// ---- real-volume ingestion ------------------------------------------------------

/// Extracts the fixed axial slice range from a `(slices, H, W)` volume.
pub fn extract_slice_range(volume: &Array3<f32>) -> Result<Vec<SliceImage>> {
    let (n, _, _) = volume.dim();
    if n <= SLICE_MAX {
        return Err(DatError::validation(format!(
            "volume has {n} slices; the range {SLICE_MIN}..={SLICE_MAX} is incomplete"
        )));
    }
    Ok((SLICE_MIN..=SLICE_MAX)
        .map(|k| SliceImage::new(volume.index_axis(ndarray::Axis(0), k).to_owned(), k))
        .collect())
}

/// Builds a validated record from aligned screening/month-12 volumes and the
/// subject's row in the LEDD table. ROI masks are derived from the screening
/// stack with the standard aggregation pipeline.
pub fn ingest_subject(
    subject_id: &str,
    screening_volume: &Array3<f32>,
    month12_volume: &Array3<f32>,
    ledd_rows: &[(String, LEDDSeries)],
) -> Result<SubjectRecord> {
    let screening = extract_slice_range(screening_volume)?;
    let month12 = extract_slice_range(month12_volume)?;
    let ledd = ledd_rows
        .iter()
        .find(|(id, _)| id == subject_id)
        .map(|(_, series)| series.clone())
        .ok_or_else(|| {
            DatError::validation(format!("no LEDD row matches subject '{subject_id}'"))
        })?;
    let roi = crate::preprocess::compute_subject_masks(&screening)?;
    let record = SubjectRecord {
        subject_id: subject_id.to_string(),
        screening,
        month12,
        ledd,
        roi,
    };
    let side = record.screening.first().map(|s| s.pixels.nrows());
    let violations = validate_record(&record, side);
    if !violations.is_empty() {
        return Err(DatError::validation(format!(
            "ingested subject '{subject_id}' is invalid: {}",
            violations
                .iter()
                .take(3)
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(record)
}
