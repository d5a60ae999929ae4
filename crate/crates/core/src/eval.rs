//! ROI-weighted evaluation metrics (MAE, MSE, SSIM), the no-progression
//! baseline, per-slice aggregation across subjects, and report rendering
//! (CSV plus a formatted text table with relative deltas).

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::{to_training_pairs, ROIWeightMask, SliceImage, SubjectRecord, TrainingPair};
use crate::diffusion::{sample_from, NoiseSchedule, VelocityModel};
use crate::error::{DatError, Result};
use crate::ledd::LeddAutoencoder;
use crate::train::weighted_mae;
use crate::util::derive_seed;

/// How metric units are chosen; emitted at the top of every report.
pub const REPORT_UNITS_NOTE: &str =
    "MAE/MSE in normalized [-1,1] intensity units; SSIM on the same images mapped to [0,1] (window 11x11, sigma 1.5, K1=0.01, K2=0.03, L=1)";

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

// ---- metric primitives --------------------------------------------------------

/// `sum(W .* |a - b|) / sum(W)`.
pub fn roi_weighted_mae(a: &Array2<f32>, b: &Array2<f32>, mask: &ROIWeightMask) -> Result<f64> {
    weighted_mae(a, b, mask)
}

/// `sum(W .* (a - b)^2) / sum(W)`.
pub fn roi_weighted_mse(a: &Array2<f32>, b: &Array2<f32>, mask: &ROIWeightMask) -> Result<f64> {
    if a.dim() != b.dim() || a.dim() != mask.weights.dim() {
        return Err(DatError::validation("roi_weighted_mse: shape mismatch"));
    }
    let mut num = 0.0f64;
    let mut mass = 0.0f64;
    for ((x, y), w) in a.iter().zip(b.iter()).zip(mask.weights.iter()) {
        let d = f64::from(*x) - f64::from(*y);
        num += f64::from(*w) * d * d;
        mass += f64::from(*w);
    }
    if mass <= 0.0 {
        return Err(DatError::validation(
            "roi_weighted_mse: weight mask sums to zero; cannot normalize",
        ));
    }
    Ok(num / mass)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode filter; output is `(h - 10, w - 10)`.
fn filter_valid(img: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut rows = Array2::<f64>::zeros((h, w - SSIM_WINDOW + 1));
    for i in 0..h {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (u, kv) in k.iter().enumerate() {
                acc += kv * img[[i, j + u]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for i in 0..h - SSIM_WINDOW + 1 {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (u, kv) in k.iter().enumerate() {
                acc += kv * rows[[i + u, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Valid-mode 11x11 minimum filter (used to drop windows touching
/// zero-weight pixels).
fn min_filter_valid(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let mut rows = Array2::<f32>::zeros((h, w - SSIM_WINDOW + 1));
    for i in 0..h {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut m = f32::INFINITY;
            for u in 0..SSIM_WINDOW {
                m = m.min(img[[i, j + u]]);
            }
            rows[[i, j]] = m;
        }
    }
    let mut out = Array2::<f32>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for i in 0..h - SSIM_WINDOW + 1 {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut m = f32::INFINITY;
            for u in 0..SSIM_WINDOW {
                m = m.min(rows[[i + u, j]]);
            }
            out[[i, j]] = m;
        }
    }
    out
}

/// ROI-weighted structural similarity.
///
/// Inputs are model-space images in `[-1, 1]`; both are mapped to `[0, 1]`
/// and compared with the standard Gaussian-window SSIM (11x11, sigma 1.5,
/// dynamic range 1). The per-pixel SSIM map is computed over the valid
/// interior (no padding) and averaged with the center-pixel ROI weights;
/// windows containing any zero-weight pixel are excluded, so zero-weight
/// borders never influence the score. Identical constant images score 1;
/// differing constants are governed by the stability constants.
pub fn roi_weighted_ssim(a: &Array2<f32>, b: &Array2<f32>, mask: &ROIWeightMask) -> Result<f64> {
    if a.dim() != b.dim() || a.dim() != mask.weights.dim() {
        return Err(DatError::validation("roi_weighted_ssim: shape mismatch"));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DatError::validation(format!(
            "roi_weighted_ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let to01 = |img: &Array2<f32>| img.mapv(|v| (f64::from(v) + 1.0) / 2.0);
    let af = to01(a);
    let bf = to01(b);
    let k = gaussian_kernel();
    let mu_a = filter_valid(&af, &k);
    let mu_b = filter_valid(&bf, &k);
    let s_aa = filter_valid(&(&af * &af), &k);
    let s_bb = filter_valid(&(&bf * &bf), &k);
    let s_ab = filter_valid(&(&af * &bf), &k);

    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let margin = SSIM_WINDOW / 2;
    let win_min = min_filter_valid(&mask.weights);

    let mut num = 0.0f64;
    let mut mass = 0.0f64;
    for i in 0..h - SSIM_WINDOW + 1 {
        for j in 0..w - SSIM_WINDOW + 1 {
            if win_min[[i, j]] <= 0.0 {
                continue;
            }
            let wgt = f64::from(mask.weights[[i + margin, j + margin]]);
            let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
            let va = s_aa[[i, j]] - ma * ma;
            let vb = s_bb[[i, j]] - mb * mb;
            let cov = s_ab[[i, j]] - ma * mb;
            let ssim = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            num += wgt * ssim;
            mass += wgt;
        }
    }
    if mass <= 0.0 {
        return Err(DatError::validation(
            "roi_weighted_ssim: no positively weighted valid windows",
        ));
    }
    Ok(num / mass)
}

/// The static baseline: month 12 is predicted to equal the screening slice.
pub fn baseline_no_progression(pair: &TrainingPair) -> SliceImage {
    pair.condition.clone()
}

// ---- report --------------------------------------------------------------------

/// One evaluated (prediction, target) pair with its baseline input.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub subject_id: String,
    pub slice_index: usize,
    /// Screening slice (the no-progression prediction), normalized.
    pub condition: Array2<f32>,
    /// Model forecast, normalized.
    pub prediction: Array2<f32>,
    /// Ground-truth month-12 slice, normalized.
    pub target: Array2<f32>,
    pub mask: ROIWeightMask,
}

/// Per-slice metric means across subjects.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice_index: usize,
    pub ssim: f64,
    pub mae: f64,
    pub mse: f64,
    pub n_subjects: usize,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct MetricTriple {
    pub ssim: f64,
    pub mae: f64,
    pub mse: f64,
}

/// One rendered report row (a slice, or the mean row when `slice` is None).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub slice: Option<usize>,
    pub n_subjects: usize,
    pub baseline: MetricTriple,
    pub model: MetricTriple,
    /// Relative deltas in percent: `(model - baseline) / baseline * 100`.
    pub delta: MetricTriple,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub mean: ReportRow,
    pub units_note: String,
}

/// Relative percentage change; equal inputs give exactly 0 even at a zero
/// baseline, and a zero baseline with a differing model gives a signed
/// infinity rather than a panic.
pub fn pct_delta(model: f64, baseline: f64) -> f64 {
    if model == baseline {
        0.0
    } else if baseline == 0.0 {
        if model > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        (model - baseline) / baseline * 100.0
    }
}

fn delta_triple(model: &MetricTriple, baseline: &MetricTriple) -> MetricTriple {
    MetricTriple {
        ssim: pct_delta(model.ssim, baseline.ssim),
        mae: pct_delta(model.mae, baseline.mae),
        mse: pct_delta(model.mse, baseline.mse),
    }
}

/// Aggregates per-item metrics into the per-slice report.
///
/// Items are grouped by slice index; each metric is averaged over subjects
/// within the slice, for the model forecast and the no-progression baseline
/// alike. Every subject must contribute every slice index. The mean row
/// averages the per-slice values, and its delta columns average the
/// per-slice deltas (rather than re-deriving deltas from the averaged
/// metrics).
pub fn build_report(items: &[EvalItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(DatError::validation("cannot build a report from no items"));
    }
    let mut by_slice: BTreeMap<usize, Vec<&EvalItem>> = BTreeMap::new();
    let mut subjects: BTreeSet<&str> = BTreeSet::new();
    for item in items {
        by_slice.entry(item.slice_index).or_default().push(item);
        subjects.insert(&item.subject_id);
    }
    for (slice, group) in &by_slice {
        let present: BTreeSet<&str> = group.iter().map(|i| i.subject_id.as_str()).collect();
        if present != subjects {
            let missing: Vec<&&str> = subjects.difference(&present).collect();
            return Err(DatError::validation(format!(
                "slice {slice} is missing subjects {missing:?}"
            )));
        }
        if present.len() != group.len() {
            return Err(DatError::validation(format!(
                "slice {slice} has duplicate subject entries"
            )));
        }
    }

    let mut slice_means = Vec::with_capacity(by_slice.len());
    for (&slice, group) in &by_slice {
        let mut base = MetricTriple::default();
        let mut model = MetricTriple::default();
        for item in group {
            base.ssim += roi_weighted_ssim(&item.condition, &item.target, &item.mask)?;
            base.mae += roi_weighted_mae(&item.condition, &item.target, &item.mask)?;
            base.mse += roi_weighted_mse(&item.condition, &item.target, &item.mask)?;
            model.ssim += roi_weighted_ssim(&item.prediction, &item.target, &item.mask)?;
            model.mae += roi_weighted_mae(&item.prediction, &item.target, &item.mask)?;
            model.mse += roi_weighted_mse(&item.prediction, &item.target, &item.mask)?;
        }
        let n = group.len() as f64;
        for triple in [&mut base, &mut model] {
            triple.ssim /= n;
            triple.mae /= n;
            triple.mse /= n;
        }
        slice_means.push(SliceMeanMetrics {
            slice,
            n_subjects: group.len(),
            baseline: base,
            model,
        });
    }
    report_from_slice_means(&slice_means)
}

/// Per-slice subject-mean metrics: the input to the aggregation stage.
#[derive(Clone, Copy, Debug)]
pub struct SliceMeanMetrics {
    pub slice: usize,
    pub n_subjects: usize,
    pub baseline: MetricTriple,
    pub model: MetricTriple,
}

/// The aggregation stage of [`build_report`], usable directly when per-slice
/// metric means are already known. Computes per-slice relative deltas, then
/// the mean row (values averaged over slices, delta columns averaged over the
/// per-slice deltas).
pub fn report_from_slice_means(slice_means: &[SliceMeanMetrics]) -> Result<EvalReport> {
    if slice_means.is_empty() {
        return Err(DatError::validation("cannot build a report from no rows"));
    }
    let mut rows: Vec<ReportRow> = slice_means
        .iter()
        .map(|m| ReportRow {
            slice: Some(m.slice),
            n_subjects: m.n_subjects,
            baseline: m.baseline,
            model: m.model,
            delta: delta_triple(&m.model, &m.baseline),
        })
        .collect();
    rows.sort_by_key(|r| r.slice);

    let n_rows = rows.len() as f64;
    let mut mean = ReportRow {
        slice: None,
        n_subjects: rows.iter().map(|r| r.n_subjects).max().unwrap_or(0),
        baseline: MetricTriple::default(),
        model: MetricTriple::default(),
        delta: MetricTriple::default(),
    };
    for row in &rows {
        for (acc, src) in [
            (&mut mean.baseline, &row.baseline),
            (&mut mean.model, &row.model),
            (&mut mean.delta, &row.delta),
        ] {
            acc.ssim += src.ssim / n_rows;
            acc.mae += src.mae / n_rows;
            acc.mse += src.mse / n_rows;
        }
    }

    Ok(EvalReport {
        rows,
        mean,
        units_note: REPORT_UNITS_NOTE.to_string(),
    })
}

fn row_label(row: &ReportRow) -> String {
    row.slice.map_or_else(|| "mean".to_string(), |s| s.to_string())
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = format!("# {}\n", report.units_note);
    out.push_str("slice,n_subjects,baseline_ssim,baseline_mae,baseline_mse,model_ssim,delta_ssim_pct,model_mae,delta_mae_pct,model_mse,delta_mse_pct\n");
    for row in report.rows.iter().chain(std::iter::once(&report.mean)) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            row_label(row),
            row.n_subjects,
            row.baseline.ssim,
            row.baseline.mae,
            row.baseline.mse,
            row.model.ssim,
            row.delta.ssim,
            row.model.mae,
            row.delta.mae,
            row.model.mse,
            row.delta.mse,
        ));
    }
    out
}

/// Fixed-width text rendering in the published table's column layout.
pub fn report_to_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{}\n", report.units_note));
    out.push_str(&format!(
        "{:>5} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "Slice", "SSIM", "MAE", "MSE", "SSIM", "dSSIM%", "MAE", "dMAE%", "MSE", "dMSE%"
    ));
    out.push_str(&format!(
        "{:>5} | {:^26} | {:^53}\n",
        "", "baseline", "model"
    ));
    let fmt_row = |row: &ReportRow| {
        format!(
            "{:>5} | {:>8.3} {:>8.4} {:>8.4} | {:>8.3} {:>+8.1} {:>8.4} {:>+8.1} {:>8.4} {:>+8.1}\n",
            row_label(row),
            row.baseline.ssim,
            row.baseline.mae,
            row.baseline.mse,
            row.model.ssim,
            row.delta.ssim,
            row.model.mae,
            row.delta.mae,
            row.model.mse,
            row.delta.mse,
        )
    };
    for row in &report.rows {
        out.push_str(&fmt_row(row));
    }
    out.push_str(&fmt_row(&report.mean));
    out
}

// ---- model evaluation glue -------------------------------------------------------

/// Runs the deterministic sampler over every slice of every record and pairs
/// the forecasts with targets and baselines. Terminal latents are drawn from
/// a stream seeded by `seed`, in record order and ascending slice order, so
/// the output is reproducible.
pub fn forecast_records<M: VelocityModel>(
    model: &M,
    schedule: &NoiseSchedule,
    records: &[SubjectRecord],
    encoder: &LeddAutoencoder<f32>,
    steps: usize,
    seed: u64,
) -> Result<Vec<EvalItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE0]));
    let mut items = Vec::new();
    for record in records {
        let pairs = to_training_pairs(record)?;
        let pooled = encoder.encode(&pairs[0].ledd)?.pooled;
        let b = pairs.len();
        let (h, w) = pairs[0].condition.pixels.dim();
        let mut condition = Array4::<f32>::zeros((b, 1, h, w));
        let mut treatment = Array2::<f32>::zeros((b, pooled.len()));
        let mut x_init = Array4::<f32>::zeros((b, 1, h, w));
        for (bi, pair) in pairs.iter().enumerate() {
            condition
                .index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), 0)
                .assign(&pair.condition.pixels);
            treatment.row_mut(bi).assign(&pooled);
        }
        for v in x_init.iter_mut() {
            *v = rng.sample::<f32, _>(StandardNormal);
        }
        let forecast = sample_from(model, &condition, &treatment, schedule, steps, x_init)?;
        for (bi, pair) in pairs.into_iter().enumerate() {
            items.push(EvalItem {
                subject_id: pair.subject_id,
                slice_index: pair.slice_index,
                condition: pair.condition.pixels,
                prediction: forecast
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), 0)
                    .to_owned(),
                target: pair.target.pixels,
                mask: pair.roi,
            });
        }
    }
    Ok(items)
}

/// Forecasts every record and aggregates the per-slice report.
pub fn evaluate_model<M: VelocityModel>(
    model: &M,
    schedule: &NoiseSchedule,
    records: &[SubjectRecord],
    encoder: &LeddAutoencoder<f32>,
    steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    build_report(&forecast_records(model, schedule, records, encoder, steps, seed)?)
}
