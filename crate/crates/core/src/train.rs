//! Diffusion training: ROI-weighted loss on the velocity prediction,
//! photometric/geometric augmentations, AdamW under a warmup+cosine learning
//! rate schedule, EMA weight tracking, and single-file checkpoints.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::dataset::{
    to_training_pairs, validate_record, DoseScale, LEDDSeries, ROIWeightMask, SliceImage,
    SubjectRecord, Zone,
};
use crate::diffusion::{make_schedule, q_sample, velocity_target, EmaState, NoiseSchedule};
use crate::error::{DatError, Result};
use crate::io::{CheckpointBuilder, Checkpoint};
use crate::ledd::LeddAutoencoder;
use crate::nn::{AdamW, AdamWConfig, Graph, Var};
use crate::preprocess::percentile;
use crate::unet::{ModelCard, UNet, UNetConfig};
use crate::util::derive_seed;

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,lr,ema_decay";

/// Which residual the weighted MAE is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    /// Native network output (default).
    #[default]
    V,
    /// Reconstructed-image residual; per-item this equals the v-space
    /// residual scaled by `sigma_t`, which is how it is computed.
    X0,
}

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub ema_decay: f64,
    /// Accepted for config compatibility; this build always runs the full
    /// f32 path (loss accumulation and EMA are f64/f32 regardless).
    pub mixed_precision: bool,
    pub seed: u64,
    pub loss_space: LossSpace,
    /// Persist a numbered checkpoint every this many epochs.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr_peak: 1e-4,
            weight_decay: 1e-2,
            warmup_fraction: 0.10,
            ema_decay: 0.999,
            mixed_precision: false,
            seed: 0,
            loss_space: LossSpace::V,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(DatError::config(
                "epochs, batch_size, and checkpoint_every must be positive",
            ));
        }
        if !(self.lr_peak > 0.0) || !(self.weight_decay > 0.0) {
            return Err(DatError::config("lr_peak and weight_decay must be positive"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(DatError::config("warmup_fraction must lie in (0, 1)"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(DatError::config("ema_decay must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Augmentation ranges. Each field is the half-width (or bounds) of the
/// sampling interval; validation enforces the supported limits, so e.g. a
/// ±10 px translation request is rejected up front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub gamma_range: [f32; 2],
    pub rotation_deg: f32,
    pub translate_px: f32,
    pub scale_pct: f32,
    /// Percentile (0-100) of the image used as the out-of-bounds fill value.
    pub pad_percentile: f32,
    pub ledd_scale_pct: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            gamma_range: [0.8, 1.2],
            rotation_deg: 4.0,
            translate_px: 4.0,
            scale_pct: 5.0,
            pad_percentile: 2.0,
            ledd_scale_pct: 20.0,
        }
    }
}

impl AugmentParams {
    /// All augmentations switched off (useful for controlled runs).
    pub fn identity() -> Self {
        AugmentParams {
            gamma_range: [1.0, 1.0],
            rotation_deg: 0.0,
            translate_px: 0.0,
            scale_pct: 0.0,
            pad_percentile: 2.0,
            ledd_scale_pct: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.gamma_range;
        if !(0.8..=1.2).contains(&lo) || !(0.8..=1.2).contains(&hi) || lo > hi {
            return Err(DatError::config(
                "gamma_range must satisfy 0.8 <= lo <= hi <= 1.2",
            ));
        }
        if !(0.0..=4.0).contains(&self.rotation_deg) {
            return Err(DatError::config("rotation_deg limit is 4 degrees"));
        }
        if !(0.0..=4.0).contains(&self.translate_px) {
            return Err(DatError::config("translate_px limit is 4 pixels"));
        }
        if !(0.0..=5.0).contains(&self.scale_pct) {
            return Err(DatError::config("scale_pct limit is 5 percent"));
        }
        if !(0.0..=50.0).contains(&self.pad_percentile) {
            return Err(DatError::config("pad_percentile must lie in [0, 50]"));
        }
        if !(0.0..=20.0).contains(&self.ledd_scale_pct) {
            return Err(DatError::config("ledd_scale_pct limit is 20 percent"));
        }
        Ok(())
    }
}

// ---- loss --------------------------------------------------------------------

/// ROI-weighted mean absolute error: `sum(W .* |pred - target|) / sum(W)`.
pub fn weighted_mae(
    pred: &Array2<f32>,
    target: &Array2<f32>,
    mask: &ROIWeightMask,
) -> Result<f64> {
    if pred.dim() != target.dim() || pred.dim() != mask.weights.dim() {
        return Err(DatError::validation("weighted_mae: shape mismatch"));
    }
    let mut num = 0.0f64;
    let mut mass = 0.0f64;
    for ((p, t), w) in pred.iter().zip(target.iter()).zip(mask.weights.iter()) {
        num += f64::from(*w) * f64::from((p - t).abs());
        mass += f64::from(*w);
    }
    if mass <= 0.0 {
        return Err(DatError::validation(
            "weighted_mae: weight mask sums to zero; cannot normalize",
        ));
    }
    Ok(num / mass)
}

// ---- augmentations -----------------------------------------------------------

/// Jointly sampled spatial transform: rotate by `theta` radians and scale by
/// `scale` about the image center, then translate by `(tx, ty)` pixels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Affine {
    pub theta: f32,
    pub scale: f32,
    pub tx: f32,
    pub ty: f32,
}

impl Affine {
    #[cfg(test)]
    pub(crate) const IDENTITY: Affine = Affine {
        theta: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Source coordinates (row, col) that map onto output pixel `(i, j)`.
    fn source(&self, i: usize, j: usize, h: usize, w: usize) -> (f32, f32) {
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        let y = i as f32 - cy - self.ty;
        let x = j as f32 - cx - self.tx;
        let (sin, cos) = self.theta.sin_cos();
        // Inverse of v' = s * R(theta) * v.
        let inv_s = 1.0 / self.scale;
        let sx = inv_s * (cos * x + sin * y) + cx;
        let sy = inv_s * (-sin * x + cos * y) + cy;
        (sy, sx)
    }
}

fn sample_affine(params: &AugmentParams, rng: &mut ChaCha8Rng) -> Affine {
    let theta = rng
        .random_range(-params.rotation_deg..=params.rotation_deg)
        .to_radians();
    let s = params.scale_pct / 100.0;
    let scale = rng.random_range(1.0 - s..=1.0 + s);
    let tx = rng.random_range(-params.translate_px..=params.translate_px);
    let ty = rng.random_range(-params.translate_px..=params.translate_px);
    Affine { theta, scale, tx, ty }
}

/// Bilinear warp; out-of-bounds samples take `pad`.
pub(crate) fn warp_image(img: &Array2<f32>, aff: &Affine, pad: f32) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (sy, sx) = aff.source(i, j, h, w);
        if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f32 || sx > (w - 1) as f32 {
            return pad;
        }
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = sy - y0 as f32;
        let dx = sx - x0 as f32;
        img[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + img[[y0, x1]] * (1.0 - dy) * dx
            + img[[y1, x0]] * dy * (1.0 - dx)
            + img[[y1, x1]] * dy * dx
    })
}

/// Nearest-neighbor warp of zone labels; out-of-bounds becomes background.
pub(crate) fn warp_zones(zones: &Array2<Zone>, aff: &Affine) -> Array2<Zone> {
    let (h, w) = zones.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (sy, sx) = aff.source(i, j, h, w);
        let yi = sy.round();
        let xi = sx.round();
        if yi < 0.0 || xi < 0.0 || yi > (h - 1) as f32 || xi > (w - 1) as f32 {
            Zone::Background
        } else {
            zones[[yi as usize, xi as usize]]
        }
    })
}

/// Power-law intensity correction computed on the [0, 1] min-max scaled
/// image, then mapped back to the original intensity range.
pub fn apply_gamma(img: &Array2<f32>, gamma: f32) -> Array2<f32> {
    if gamma == 1.0 {
        return img.clone();
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in img {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return img.clone();
    }
    let span = hi - lo;
    img.mapv(|v| ((v - lo) / span).powf(gamma) * span + lo)
}

fn pad_value(img: &Array2<f32>, pct: f32) -> f32 {
    let mut sorted: Vec<f32> = img.iter().copied().collect();
    sorted.sort_by(f32::total_cmp);
    percentile(&sorted, pct / 100.0)
}

/// One photometric + one geometric augmentation, applied consistently to the
/// condition/target pair and the weight mask.
///
/// Gamma operates on pre-normalization intensities; the sampled affine is
/// shared by all three outputs. Images are resampled bilinearly and padded
/// with their own low-percentile intensity, the mask with nearest-neighbor
/// labels (background outside), so weights stay in the canonical value set.
pub fn augment_image_pair(
    condition: &SliceImage,
    target: &SliceImage,
    mask: &ROIWeightMask,
    rng: &mut ChaCha8Rng,
    params: &AugmentParams,
) -> Result<(SliceImage, SliceImage, ROIWeightMask)> {
    params.validate()?;
    if condition.normalized || target.normalized {
        return Err(DatError::validation(
            "augmentation expects pre-normalization intensities",
        ));
    }
    if condition.pixels.dim() != target.pixels.dim()
        || condition.pixels.dim() != mask.weights.dim()
    {
        return Err(DatError::validation("augmentation inputs must share shape"));
    }
    let gamma = rng.random_range(params.gamma_range[0]..=params.gamma_range[1]);
    let aff = sample_affine(params, rng);

    let warp = |img: &SliceImage| -> SliceImage {
        let lit = apply_gamma(&img.pixels, gamma);
        let pad = pad_value(&lit, params.pad_percentile);
        let out = if aff.theta == 0.0 && aff.scale == 1.0 && aff.tx == 0.0 && aff.ty == 0.0 {
            lit
        } else {
            warp_image(&lit, &aff, pad)
        };
        SliceImage::new(out, img.slice_index)
    };
    let cond_out = warp(condition);
    let target_out = warp(target);
    let zones = warp_zones(&mask.zones, &aff);
    Ok((cond_out, target_out, ROIWeightMask::from_zones(zones)))
}

/// Scales a raw dose series by `u ~ U(1 - p, 1 + p)` and log-transforms it.
pub fn augment_ledd(
    series: &LEDDSeries,
    rng: &mut ChaCha8Rng,
    params: &AugmentParams,
) -> Result<LEDDSeries> {
    params.validate()?;
    if series.scale != DoseScale::Raw {
        return Err(DatError::validation(
            "dose augmentation applies to raw series, before the log transform",
        ));
    }
    let p = params.ledd_scale_pct / 100.0;
    let u = rng.random_range(1.0 - p..=1.0 + p);
    let scaled = LEDDSeries::raw(series.doses.iter().map(|d| d * u).collect());
    scaled.to_log1p()
}

// ---- learning-rate schedule ----------------------------------------------------

/// Linear warmup to `lr_peak` over the first `warmup_fraction` of steps, then
/// cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = (cfg.warmup_fraction * total).round().max(1.0);
    if step <= warm {
        cfg.lr_peak * step / warm
    } else {
        let progress = (step - warm) / (total - warm);
        cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

// ---- batches -------------------------------------------------------------------

/// One model-ready example: normalized images, weight map, pooled treatment.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub condition: Array2<f32>,
    pub target: Array2<f32>,
    pub weights: Array2<f32>,
    pub treatment: Array1<f32>,
}

/// A validation example with its frozen noise draw.
#[derive(Clone, Debug)]
pub struct ValExample {
    pub example: PreparedExample,
    pub t: usize,
    pub eps: Array2<f32>,
}

fn record_examples(
    record: &SubjectRecord,
    treatment: &Array1<f32>,
    augment: Option<(&AugmentParams, &mut ChaCha8Rng)>,
) -> Result<Vec<PreparedExample>> {
    let mut order: Vec<usize> = (0..record.screening.len()).collect();
    order.sort_by_key(|&i| record.screening[i].slice_index);
    let mut out = Vec::with_capacity(order.len());
    let mut augment = augment;
    for &i in &order {
        let cond = &record.screening[i];
        let target = record
            .month12
            .iter()
            .find(|m| m.slice_index == cond.slice_index)
            .ok_or_else(|| {
                DatError::validation(format!(
                    "{}: no month-12 slice {}",
                    record.subject_id, cond.slice_index
                ))
            })?;
        let (c, t, m) = match augment.as_mut() {
            Some((params, rng)) => augment_image_pair(cond, target, &record.roi[i], rng, params)?,
            None => (cond.clone(), target.clone(), record.roi[i].clone()),
        };
        out.push(PreparedExample {
            condition: c.normalize_unit().pixels,
            target: t.normalize_unit().pixels,
            weights: m.weights,
            treatment: treatment.clone(),
        });
    }
    Ok(out)
}

/// Builds one epoch's augmented training examples. Records are visited in
/// order with a single RNG so the result is a pure function of `(records,
/// rng state)`.
pub fn prepare_training_examples(
    records: &[SubjectRecord],
    encoder: &LeddAutoencoder<f32>,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreparedExample>> {
    let mut out = Vec::new();
    for record in records {
        let ledd = augment_ledd(&record.ledd, rng, params)?;
        let treatment = encoder.encode(&ledd)?.pooled;
        out.extend(record_examples(record, &treatment, Some((params, rng)))?);
    }
    Ok(out)
}

/// Builds validation examples with per-item `(t, eps)` frozen from the seed,
/// so every epoch scores the same corruption of the same images.
pub fn prepare_validation_examples(
    records: &[SubjectRecord],
    encoder: &LeddAutoencoder<f32>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<ValExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD5]));
    let mut out = Vec::new();
    for record in records {
        let ledd = record.ledd.to_log1p()?;
        let treatment = encoder.encode(&ledd)?.pooled;
        for example in record_examples(record, &treatment, None)? {
            let t = rng.random_range(1..=schedule.t_max);
            let (h, w) = example.condition.dim();
            let eps = Array2::from_shape_simple_fn((h, w), || rng.sample(StandardNormal));
            out.push(ValExample { example, t, eps });
        }
    }
    Ok(out)
}

struct BatchArrays {
    x_t: Array4<f32>,
    cond: Array4<f32>,
    treat: Array2<f32>,
    ts: Vec<usize>,
    v_target: Array4<f32>,
    weights: Array4<f32>,
    sigmas: Vec<f64>,
}

fn assemble_batch(
    items: &[&PreparedExample],
    draws: &[(usize, Array2<f32>)],
    schedule: &NoiseSchedule,
) -> Result<BatchArrays> {
    let b = items.len();
    let (h, w) = items[0].condition.dim();
    let r = items[0].treatment.len();
    let mut x_t = Array4::<f32>::zeros((b, 1, h, w));
    let mut cond = Array4::<f32>::zeros((b, 1, h, w));
    let mut v_target = Array4::<f32>::zeros((b, 1, h, w));
    let mut weights = Array4::<f32>::zeros((b, 1, h, w));
    let mut treat = Array2::<f32>::zeros((b, r));
    let mut ts = Vec::with_capacity(b);
    let mut sigmas = Vec::with_capacity(b);
    for (bi, (item, (t, eps))) in items.iter().zip(draws).enumerate() {
        if item.condition.dim() != (h, w) || item.treatment.len() != r {
            return Err(DatError::validation("inconsistent example shapes in batch"));
        }
        let xt = q_sample(&item.target, *t, eps, schedule)?;
        let v = velocity_target(&item.target, eps, *t, schedule)?;
        x_t.index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&xt);
        v_target
            .index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&v);
        cond.index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&item.condition);
        weights
            .index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&item.weights);
        treat.row_mut(bi).assign(&item.treatment);
        ts.push(*t);
        sigmas.push(schedule.sigma(*t));
    }
    Ok(BatchArrays {
        x_t,
        cond,
        treat,
        ts,
        v_target,
        weights,
        sigmas,
    })
}

fn batch_loss_var(
    model: &UNet<f32>,
    g: &Graph<f32>,
    batch: &BatchArrays,
    loss_space: LossSpace,
) -> Result<Var> {
    let xv = g.input(batch.x_t.clone().into_dyn());
    let cv = g.input(batch.cond.clone().into_dyn());
    let tv = g.input(batch.treat.clone().into_dyn());
    let v_hat = model.forward_graph(g, xv, cv, &batch.ts, tv)?;
    let weights = batch.weights.clone().into_dyn();
    Ok(match loss_space {
        LossSpace::V => g.weighted_l1_to_const(v_hat, &batch.v_target.clone().into_dyn(), &weights),
        LossSpace::X0 => {
            // |x0_hat - x0| = sigma_t * |v_hat - v|, so scale both sides.
            let (b, _, h, w) = batch.x_t.dim();
            let mut sig = Array4::<f32>::zeros((b, 1, h, w));
            for bi in 0..b {
                sig.index_axis_mut(Axis(0), bi).fill(batch.sigmas[bi] as f32);
            }
            let scaled_target = &batch.v_target * &sig;
            let pred = g.mul(v_hat, g.input(sig.into_dyn()));
            g.weighted_l1_to_const(pred, &scaled_target.into_dyn(), &weights)
        }
    })
}

// ---- trainer -------------------------------------------------------------------

/// Per-epoch log row; mirrors the metrics CSV columns.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub ema_decay: f64,
}

pub fn metrics_to_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.train_loss, m.val_loss, m.lr, m.ema_decay
        ));
    }
    out
}

/// Model, optimizer, EMA, and progress counters for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub augment: AugmentParams,
    pub unet_cfg: UNetConfig,
    pub model: UNet<f32>,
    pub opt: AdamW<f32>,
    pub ema: EmaState<f32>,
    pub schedule: NoiseSchedule,
    /// Next epoch to run.
    pub epoch: usize,
    /// Global optimizer steps taken.
    pub step: usize,
    pub best_val: Option<f64>,
    pub history: Vec<EpochMetrics>,
    last_lr: f64,
    last_ema_decay: f64,
    recent_losses: Vec<f64>,
}

impl Trainer {
    pub fn new(unet_cfg: UNetConfig, cfg: TrainConfig, augment: AugmentParams) -> Result<Self> {
        cfg.validate()?;
        augment.validate()?;
        let model = UNet::new(&unet_cfg, derive_seed(cfg.seed, &[0xD0]))?;
        let schedule = make_schedule(unet_cfg.t_max)?;
        let opt = AdamW::new(
            &model.params,
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
        );
        let ema = EmaState::new(&model.params, cfg.ema_decay);
        Ok(Trainer {
            cfg,
            augment,
            unet_cfg,
            model,
            opt,
            ema,
            schedule,
            epoch: 0,
            step: 0,
            best_val: None,
            history: Vec::new(),
            last_lr: 0.0,
            last_ema_decay: 0.0,
            recent_losses: Vec::new(),
        })
    }

    /// A copy of the model carrying the EMA weights.
    pub fn ema_model(&self) -> Result<UNet<f32>> {
        let mut model = UNet::new(&self.unet_cfg, derive_seed(self.cfg.seed, &[0xD0]))?;
        self.ema.write_to(&mut model.params)?;
        Ok(model)
    }

    /// One optimizer step on a prepared batch: samples `(t, eps)` per item,
    /// corrupts targets, scores v-hat with the ROI-weighted MAE, and applies
    /// AdamW followed by an EMA update.
    pub fn train_step(
        &mut self,
        items: &[&PreparedExample],
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if items.is_empty() {
            return Err(DatError::validation("empty training batch"));
        }
        let draws: Vec<(usize, Array2<f32>)> = items
            .iter()
            .map(|item| {
                let t = rng.random_range(1..=self.schedule.t_max);
                let (h, w) = item.condition.dim();
                let eps = Array2::from_shape_simple_fn((h, w), || rng.sample(StandardNormal));
                (t, eps)
            })
            .collect();
        let batch = assemble_batch(items, &draws, &self.schedule)?;
        let g = Graph::<f32>::new();
        let loss = batch_loss_var(&self.model, &g, &batch, self.cfg.loss_space)?;
        let lv = f64::from(g.scalar_value(loss));
        if !lv.is_finite() {
            return Err(DatError::internal(format!(
                "non-finite loss {lv} at step {} (t values {:?}); recent losses: {:?}",
                self.step, batch.ts, self.recent_losses
            )));
        }
        let grads = g.backward(loss);
        self.opt.step(&mut self.model.params, &grads, lr);
        self.last_ema_decay = self.ema.warmup_decay();
        self.ema.update_warmup(&self.model.params)?;
        self.step += 1;
        self.last_lr = lr;
        self.recent_losses.push(lv);
        if self.recent_losses.len() > 10 {
            self.recent_losses.remove(0);
        }
        Ok(lv)
    }

    /// Mean loss over the frozen validation examples (no gradients).
    pub fn validation_loss(&self, items: &[ValExample]) -> Result<f64> {
        if items.is_empty() {
            return Err(DatError::validation("empty validation set"));
        }
        let mut total = 0.0;
        for chunk in items.chunks(self.cfg.batch_size) {
            let refs: Vec<&PreparedExample> = chunk.iter().map(|v| &v.example).collect();
            let draws: Vec<(usize, Array2<f32>)> =
                chunk.iter().map(|v| (v.t, v.eps.clone())).collect();
            let batch = assemble_batch(&refs, &draws, &self.schedule)?;
            let g = Graph::<f32>::no_grad();
            let loss = batch_loss_var(&self.model, &g, &batch, self.cfg.loss_space)?;
            total += f64::from(g.scalar_value(loss)) * chunk.len() as f64;
        }
        Ok(total / items.len() as f64)
    }
}

// ---- checkpointing ---------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    kind: String,
    epoch: usize,
    step: usize,
    best_val: Option<f64>,
    ema_updates: u64,
    adam_step: u64,
    train: TrainConfig,
    augment: AugmentParams,
    unet: UNetConfig,
    schedule_hash: String,
    history: Vec<EpochMetrics>,
}

/// Writes the full trainer state (raw weights, EMA shadow, optimizer moments,
/// configs, progress counters) into one checkpoint file.
pub fn save_trainer(path: &Path, trainer: &Trainer) -> Result<()> {
    let meta = TrainerMeta {
        kind: "diffusion_trainer".into(),
        epoch: trainer.epoch,
        step: trainer.step,
        best_val: trainer.best_val,
        ema_updates: trainer.ema.updates,
        adam_step: trainer.opt.step_count(),
        train: trainer.cfg.clone(),
        augment: trainer.augment.clone(),
        unet: trainer.unet_cfg.clone(),
        schedule_hash: trainer.schedule.hash(),
        history: trainer.history.clone(),
    };
    let meta = serde_json::to_value(&meta)
        .map_err(|e| DatError::internal(format!("meta encode: {e}")))?;
    let mut builder = CheckpointBuilder::new(meta);
    builder.add_param_set("model.", &trainer.model.params)?;
    let mut shadow = trainer.model.params.clone();
    for (id, value) in shadow
        .ids()
        .collect::<Vec<_>>()
        .into_iter()
        .zip(trainer.ema.shadow.iter())
    {
        shadow.set(id, value.clone());
    }
    builder.add_param_set("ema.", &shadow)?;
    let (m, v, _) = trainer.opt.state();
    let mut mset = trainer.model.params.clone();
    let mut vset = trainer.model.params.clone();
    for ((id, mv), vv) in mset.ids().collect::<Vec<_>>().into_iter().zip(m).zip(v) {
        mset.set(id, mv.clone());
        vset.set(id, vv.clone());
    }
    builder.add_param_set("adam.m.", &mset)?;
    builder.add_param_set("adam.v.", &vset)?;
    builder.write(path)
}

/// Restores a trainer saved by [`save_trainer`]; resuming from the result
/// reproduces the original run's remaining epochs.
pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let ckpt = Checkpoint::read(path)?;
    let meta: TrainerMeta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| DatError::format(format!("checkpoint meta: {e}")))?;
    if meta.kind != "diffusion_trainer" {
        return Err(DatError::format(format!(
            "not a trainer checkpoint (kind {})",
            meta.kind
        )));
    }
    let mut trainer = Trainer::new(meta.unet, meta.train, meta.augment)?;
    if trainer.schedule.hash() != meta.schedule_hash {
        return Err(DatError::format(
            "checkpoint schedule hash does not match the rebuilt schedule",
        ));
    }
    ckpt.load_param_set("model.", &mut trainer.model.params)?;
    let mut shadow = trainer.model.params.clone();
    ckpt.load_param_set("ema.", &mut shadow)?;
    trainer.ema.shadow = shadow.clone_values();
    trainer.ema.updates = meta.ema_updates;
    let mut mset = trainer.model.params.clone();
    let mut vset = trainer.model.params.clone();
    ckpt.load_param_set("adam.m.", &mut mset)?;
    ckpt.load_param_set("adam.v.", &mut vset)?;
    trainer
        .opt
        .restore(mset.clone_values(), vset.clone_values(), meta.adam_step);
    trainer.epoch = meta.epoch;
    trainer.step = meta.step;
    trainer.best_val = meta.best_val;
    trainer.history = meta.history;
    Ok(trainer)
}

// ---- training loop ---------------------------------------------------------------

fn validate_records(records: &[SubjectRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(DatError::validation(format!("{what} split is empty")));
    }
    for record in records {
        let side = record.screening.first().map(|s| s.side()).unwrap_or(0);
        let violations = validate_record(record, Some(side));
        if !violations.is_empty() {
            return Err(DatError::validation(format!(
                "{what} subject {}: {}",
                record.subject_id, violations[0]
            )));
        }
    }
    Ok(())
}

/// Runs epochs `trainer.epoch .. cfg.epochs`: augmented training passes, a
/// frozen-noise validation pass per epoch, metrics logging, and (when
/// `out_dir` is given) periodic/best/last checkpoints plus `metrics.csv` and
/// a model card.
pub fn run_training(
    trainer: &mut Trainer,
    train_records: &[SubjectRecord],
    val_records: &[SubjectRecord],
    encoder: &LeddAutoencoder<f32>,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    validate_records(train_records, "train")?;
    validate_records(val_records, "validation")?;
    if encoder.cfg.latent_dim != trainer.unet_cfg.treatment_dim {
        return Err(DatError::config(format!(
            "encoder latent dim {} != model treatment dim {}",
            encoder.cfg.latent_dim, trainer.unet_cfg.treatment_dim
        )));
    }
    let val_items = prepare_validation_examples(
        val_records,
        encoder,
        &trainer.schedule,
        trainer.cfg.seed,
    )?;

    let pairs_per_epoch: usize = train_records.iter().map(|r| r.screening.len()).sum();
    let steps_per_epoch = pairs_per_epoch.div_ceil(trainer.cfg.batch_size);
    let total_steps = trainer.cfg.epochs * steps_per_epoch;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let card = ModelCard {
            config: trainer.unet_cfg.clone(),
            param_count: trainer.model.param_count(),
            training_seed: trainer.cfg.seed,
            schedule_hash: trainer.schedule.hash(),
        };
        let text = serde_json::to_string_pretty(&card)
            .map_err(|e| DatError::internal(format!("model card encode: {e}")))?;
        std::fs::write(dir.join("model_card.json"), text)?;
    }

    let seed = trainer.cfg.seed;
    for epoch in trainer.epoch..trainer.cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD1, epoch as u64]));
        let examples =
            prepare_training_examples(train_records, encoder, &trainer.augment, &mut rng)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(trainer.cfg.batch_size) {
            let refs: Vec<&PreparedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let lr = lr_at(trainer.step + 1, total_steps, &trainer.cfg);
            let loss = trainer.train_step(&refs, lr, &mut rng)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / examples.len() as f64;
        let val_loss = trainer.validation_loss(&val_items)?;
        trainer.epoch = epoch + 1;
        trainer.history.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            lr: trainer.last_lr,
            ema_decay: trainer.last_ema_decay,
        });

        if let Some(dir) = out_dir {
            std::fs::write(dir.join("metrics.csv"), metrics_to_csv(&trainer.history))?;
            let improved = trainer.best_val.map_or(true, |b| val_loss < b);
            if improved {
                trainer.best_val = Some(val_loss);
                save_trainer(&dir.join("checkpoint_best.dfck"), trainer)?;
            }
            if (epoch + 1) % trainer.cfg.checkpoint_every == 0 {
                save_trainer(
                    &dir.join(format!("checkpoint_epoch_{:03}.dfck", epoch + 1)),
                    trainer,
                )?;
            }
            save_trainer(&dir.join("checkpoint_last.dfck"), trainer)?;
        } else if trainer.best_val.map_or(true, |b| val_loss < b) {
            trainer.best_val = Some(val_loss);
        }
    }
    Ok(trainer.history.clone())
}

/// Caches pooled treatment embeddings per subject (the encoder is frozen
/// during diffusion training, so one encode per distinct series suffices).
pub fn encode_subjects(
    records: &[SubjectRecord],
    encoder: &LeddAutoencoder<f32>,
) -> Result<HashMap<String, Array1<f32>>> {
    let mut out = HashMap::new();
    for record in records {
        let ledd = if record.ledd.scale == DoseScale::Log1p {
            record.ledd.clone()
        } else {
            record.ledd.to_log1p()?
        };
        out.insert(record.subject_id.clone(), encoder.encode(&ledd)?.pooled);
    }
    Ok(out)
}

/// Expands validated records into normalized, non-augmented pairs (shared by
/// evaluation and forecasting).
pub fn plain_examples(
    records: &[SubjectRecord],
    encoder: &LeddAutoencoder<f32>,
) -> Result<Vec<(String, usize, PreparedExample)>> {
    let mut out = Vec::new();
    for record in records {
        let pairs = to_training_pairs(record)?;
        let treatment = encoder.encode(&pairs[0].ledd)?.pooled;
        for pair in pairs {
            out.push((
                pair.subject_id.clone(),
                pair.slice_index,
                PreparedExample {
                    condition: pair.condition.pixels,
                    target: pair.target.pixels,
                    weights: pair.roi.weights,
                    treatment: treatment.clone(),
                },
            ));
        }
    }
    Ok(out)
}
