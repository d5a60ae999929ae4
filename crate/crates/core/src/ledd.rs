//! Contrastive sequence autoencoder for 12-month medication series.
//!
//! A small pre-norm Transformer encodes the log-scale dose sequence into a
//! 12×128 latent; the mean-pooled, L2-normalized row is the treatment
//! embedding consumed by the forecaster. Training corrupts each series with
//! block-level dose shifts, draws two stochastically modulated views, and
//! optimizes reconstruction of the uncorrupted sequence plus a temperature-
//! scaled InfoNCE term between the two views' pooled embeddings.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DoseScale, LEDDSeries, LEDD_MONTHS};
use crate::error::{DatError, Result};
use crate::nn::{
    kaiming_uniform, uniform_bias, zeros, AdamW, AdamWConfig, Graph, ParamId, ParamSet, Scalar,
    Var,
};
use crate::util::derive_seed;

/// Hyperparameters of the sequence autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub sequence_length: usize,
    /// InfoNCE temperature τ.
    pub temperature: f64,
    /// Weight β of the contrastive term in the joint loss.
    pub beta: f64,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 256,
            latent_dim: 128,
            layers: 3,
            sequence_length: LEDD_MONTHS,
            temperature: 0.2,
            beta: 0.1,
            heads: 4,
            ff_dim: 512,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.hidden_dim,
            self.latent_dim,
            self.layers,
            self.sequence_length,
            self.heads,
            self.ff_dim,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(DatError::config("encoder dimensions must be positive"));
        }
        if self.temperature <= 0.0 {
            return Err(DatError::config("temperature must be positive"));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(DatError::config("hidden_dim must be divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DatError::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Encoder output: the per-month latent matrix and its pooled summary.
#[derive(Clone, Debug)]
pub struct TreatmentEmbedding {
    /// `Z`: one latent row per month (sequence_length × latent_dim).
    pub sequence_latent: Array2<f32>,
    /// `r`: L2-normalized temporal mean of `Z`.
    pub pooled: Array1<f32>,
}

impl TreatmentEmbedding {
    /// Checks the pooled-vector invariants (unit norm, consistency with Z).
    pub fn validate(&self) -> Result<()> {
        let norm = self.pooled.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(DatError::validation(format!(
                "pooled norm {norm} is not 1 within 1e-5"
            )));
        }
        let t = self.sequence_latent.nrows() as f64;
        let mean: Vec<f64> = self
            .sequence_latent
            .columns()
            .into_iter()
            .map(|c| c.iter().map(|v| *v as f64).sum::<f64>() / t)
            .collect();
        let mnorm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if mnorm == 0.0 {
            return Err(DatError::validation("zero pooled vector"));
        }
        for (i, m) in mean.iter().enumerate() {
            if (m / mnorm - self.pooled[i] as f64).abs() > 1e-4 {
                return Err(DatError::validation(
                    "pooled vector is not the normalized temporal mean",
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

/// Deterministic core of [`block_perturb`]: adds `delta` mg to
/// `months[start..start+k]` and clamps at zero.
pub fn block_perturb_with(series: &LEDDSeries, k: usize, start: usize, delta: f32) -> LEDDSeries {
    let mut doses = series.doses.clone();
    for d in doses.iter_mut().skip(start).take(k) {
        *d = (*d + delta).max(0.0);
    }
    LEDDSeries {
        doses,
        scale: series.scale,
    }
}

/// Dataset-level augmentation: one contiguous block of 3–6 months receives a
/// common additive dose shift `Δ = c × 25 mg`, `c ~ U(−5, 5)`, clamped at 0.
pub fn block_perturb(series: &LEDDSeries, rng: &mut ChaCha8Rng) -> Result<LEDDSeries> {
    if series.scale != DoseScale::Raw {
        return Err(DatError::validation("block_perturb expects a raw series"));
    }
    let n = series.doses.len();
    if n < 6 {
        return Err(DatError::validation("series too short for block perturbation"));
    }
    let k = rng.random_range(3..=6usize);
    let start = rng.random_range(0..=(n - k));
    let c: f32 = rng.random_range(-5.0..5.0);
    Ok(block_perturb_with(series, k, start, c * 25.0))
}

/// Deterministic core of [`stochastic_modulate`] for one view.
pub fn modulate_with(doses: &[f32], gamma: f32, noise: &[f32]) -> Vec<f32> {
    doses
        .iter()
        .zip(noise)
        .map(|(&d, &n)| (gamma * d + n).max(0.0))
        .collect()
}

/// Draws two stochastic views: each is scaled by its own `γ ~ U(0.9, 1.1)`
/// and perturbed with zero-mean Gaussian noise (std = 2% of the mean dose,
/// floored at 1 mg), then clamped at zero.
pub fn stochastic_modulate(
    series: &LEDDSeries,
    rng: &mut ChaCha8Rng,
) -> (LEDDSeries, LEDDSeries) {
    let mean = series.doses.iter().sum::<f32>() / series.doses.len().max(1) as f32;
    let std = (0.02 * mean).max(1.0);
    let normal = Normal::new(0.0f32, std).expect("std is positive and finite");
    let draw = |rng: &mut ChaCha8Rng| {
        let gamma: f32 = rng.random_range(0.9..1.1);
        let noise: Vec<f32> = (0..series.doses.len()).map(|_| normal.sample(rng)).collect();
        LEDDSeries {
            doses: modulate_with(&series.doses, gamma, &noise),
            scale: series.scale,
        }
    };
    (draw(rng), draw(rng))
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct LayerIds {
    ln1_w: ParamId,
    ln1_b: ParamId,
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln2_w: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// The Transformer autoencoder over dose sequences.
pub struct LeddAutoencoder<S: Scalar> {
    pub cfg: EncoderConfig,
    pub params: ParamSet<S>,
    lift_w: ParamId,
    lift_b: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    final_ln_w: ParamId,
    final_ln_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    dec1_w: ParamId,
    dec1_b: ParamId,
    dec2_w: ParamId,
    dec2_b: ParamId,
}

fn ones<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::from_elem(IxDyn(shape), S::one())
}

impl<S: Scalar> LeddAutoencoder<S> {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps: ParamSet<S> = ParamSet::new();
        let (h, l, t, ff) = (cfg.hidden_dim, cfg.latent_dim, cfg.sequence_length, cfg.ff_dim);

        let lift_w = ps.add("lift.w", kaiming_uniform(&mut rng, &[1, h], 1));
        let lift_b = ps.add("lift.b", uniform_bias(&mut rng, &[h], 1));
        // Learned positional table at unit scale: comparable to the lifted
        // dose activations, so attention is position-aware from the start.
        let pos = ps.add("pos", kaiming_uniform(&mut rng, &[t, h], 1));

        let mut layers = Vec::new();
        for i in 0..cfg.layers {
            let p = |n: &str| format!("enc.{i}.{n}");
            layers.push(LayerIds {
                ln1_w: ps.add(&p("ln1.w"), ones(&[h])),
                ln1_b: ps.add(&p("ln1.b"), zeros(&[h])),
                q_w: ps.add(&p("attn.q.w"), kaiming_uniform(&mut rng, &[h, h], h)),
                q_b: ps.add(&p("attn.q.b"), zeros(&[h])),
                k_w: ps.add(&p("attn.k.w"), kaiming_uniform(&mut rng, &[h, h], h)),
                k_b: ps.add(&p("attn.k.b"), zeros(&[h])),
                v_w: ps.add(&p("attn.v.w"), kaiming_uniform(&mut rng, &[h, h], h)),
                v_b: ps.add(&p("attn.v.b"), zeros(&[h])),
                o_w: ps.add(&p("attn.o.w"), kaiming_uniform(&mut rng, &[h, h], h)),
                o_b: ps.add(&p("attn.o.b"), zeros(&[h])),
                ln2_w: ps.add(&p("ln2.w"), ones(&[h])),
                ln2_b: ps.add(&p("ln2.b"), zeros(&[h])),
                ff1_w: ps.add(&p("ff1.w"), kaiming_uniform(&mut rng, &[h, ff], h)),
                ff1_b: ps.add(&p("ff1.b"), uniform_bias(&mut rng, &[ff], h)),
                ff2_w: ps.add(&p("ff2.w"), kaiming_uniform(&mut rng, &[ff, h], ff)),
                ff2_b: ps.add(&p("ff2.b"), uniform_bias(&mut rng, &[h], ff)),
            });
        }

        let final_ln_w = ps.add("final_ln.w", ones(&[h]));
        let final_ln_b = ps.add("final_ln.b", zeros(&[h]));
        let head_w = ps.add("head.w", kaiming_uniform(&mut rng, &[h, l], h));
        let head_b = ps.add("head.b", uniform_bias(&mut rng, &[l], h));
        let dec1_w = ps.add("dec1.w", kaiming_uniform(&mut rng, &[l, h], l));
        let dec1_b = ps.add("dec1.b", uniform_bias(&mut rng, &[h], l));
        let dec2_w = ps.add("dec2.w", kaiming_uniform(&mut rng, &[h, 1], h));
        let dec2_b = ps.add("dec2.b", uniform_bias(&mut rng, &[1], h));

        Ok(LeddAutoencoder {
            cfg: cfg.clone(),
            params: ps,
            lift_w,
            lift_b,
            pos,
            layers,
            final_ln_w,
            final_ln_b,
            head_w,
            head_b,
            dec1_w,
            dec1_b,
            dec2_w,
            dec2_b,
        })
    }

    fn maybe_dropout(&self, g: &Graph<S>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let p = self.cfg.dropout;
        let Some(r) = rng.as_deref_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let shape = g.shape(x);
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
            if r.random_range(0.0..1.0f64) < p {
                S::zero()
            } else {
                keep
            }
        });
        g.mul(x, g.input(mask))
    }

    /// Encoder as graph ops over `x` of shape `(B, T)` in log scale.
    ///
    /// Returns `(Z, r)` with shapes `(B, T, latent)` and `(B, latent)`.
    pub fn encode_graph(
        &self,
        g: &Graph<S>,
        ps: &ParamSet<S>,
        x: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x);
        let (t, h) = (self.cfg.sequence_length, self.cfg.hidden_dim);
        if shape.len() != 2 || shape[1] != t {
            return Err(DatError::validation(format!(
                "encoder input must be (B, {t}), got {shape:?}"
            )));
        }
        let b = shape[0];
        let heads = self.cfg.heads;
        let dh = h / heads;

        // Lift each month's scalar dose into the hidden space.
        let flat = g.reshape(x, &[b * t, 1]);
        let mut hx = g.linear(flat, g.param(ps, self.lift_w), Some(g.param(ps, self.lift_b)));
        hx = g.gelu(hx);

        // Learned positional embeddings, broadcast over the batch.
        let hx_bt = g.reshape(hx, &[b, t * h]);
        let pos_flat = g.reshape(g.param(ps, self.pos), &[t * h]);
        hx = g.reshape(g.add_broadcast_rows(hx_bt, pos_flat), &[b * t, h]);

        let inv_sqrt_dh = S::from_f64(1.0 / (dh as f64).sqrt());
        for lay in &self.layers {
            // Pre-norm multi-head self-attention.
            let a = g.layer_norm(hx, g.param(ps, lay.ln1_w), g.param(ps, lay.ln1_b), 1e-5);
            let split = |g: &Graph<S>, v: Var| {
                let v = g.reshape(v, &[b, t, heads, dh]);
                let v = g.permute(v, &[0, 2, 1, 3]);
                g.reshape(v, &[b * heads, t, dh])
            };
            let q = split(g, g.linear(a, g.param(ps, lay.q_w), Some(g.param(ps, lay.q_b))));
            let k = split(g, g.linear(a, g.param(ps, lay.k_w), Some(g.param(ps, lay.k_b))));
            let v = split(g, g.linear(a, g.param(ps, lay.v_w), Some(g.param(ps, lay.v_b))));
            let logits = g.scale(g.bmm(q, k, true), inv_sqrt_dh);
            let att = g.softmax_last(logits);
            let ctx = g.bmm(att, v, false);
            let ctx = g.reshape(ctx, &[b, heads, t, dh]);
            let ctx = g.permute(ctx, &[0, 2, 1, 3]);
            let ctx = g.reshape(ctx, &[b * t, h]);
            let mut o = g.linear(ctx, g.param(ps, lay.o_w), Some(g.param(ps, lay.o_b)));
            o = self.maybe_dropout(g, o, &mut dropout_rng);
            hx = g.add(hx, o);

            // Pre-norm feed-forward.
            let f = g.layer_norm(hx, g.param(ps, lay.ln2_w), g.param(ps, lay.ln2_b), 1e-5);
            let f = g.linear(f, g.param(ps, lay.ff1_w), Some(g.param(ps, lay.ff1_b)));
            let f = g.gelu(f);
            let mut f = g.linear(f, g.param(ps, lay.ff2_w), Some(g.param(ps, lay.ff2_b)));
            f = self.maybe_dropout(g, f, &mut dropout_rng);
            hx = g.add(hx, f);
        }

        let hx = g.layer_norm(
            hx,
            g.param(ps, self.final_ln_w),
            g.param(ps, self.final_ln_b),
            1e-5,
        );
        let z_flat = g.linear(hx, g.param(ps, self.head_w), Some(g.param(ps, self.head_b)));
        let z = g.reshape(z_flat, &[b, t, self.cfg.latent_dim]);
        let pooled = g.mean_axis1(z);
        let r = g.l2_normalize_rows(pooled, 1e-12);
        Ok((z, r))
    }

    /// Decoder as graph ops: per-month head `latent → hidden → 1`.
    pub fn decode_graph(&self, g: &Graph<S>, ps: &ParamSet<S>, z: Var) -> Result<Var> {
        let shape = g.shape(z);
        let (t, l) = (self.cfg.sequence_length, self.cfg.latent_dim);
        if shape.len() != 3 || shape[1] != t || shape[2] != l {
            return Err(DatError::validation(format!(
                "latent must be (B, {t}, {l}), got {shape:?}"
            )));
        }
        let b = shape[0];
        let flat = g.reshape(z, &[b * t, l]);
        let d = g.linear(flat, g.param(ps, self.dec1_w), Some(g.param(ps, self.dec1_b)));
        let d = g.gelu(d);
        let d = g.linear(d, g.param(ps, self.dec2_w), Some(g.param(ps, self.dec2_b)));
        Ok(g.reshape(d, &[b, t]))
    }

    /// Joint loss over two log-scale views: returns `(total, rec, cl)` nodes.
    ///
    /// `target_log` is the uncorrupted log-scale batch `(B, T)`; the
    /// reconstruction term averages both views' MSE against it.
    pub fn loss_graph(
        &self,
        g: &Graph<S>,
        ps: &ParamSet<S>,
        view1: Var,
        view2: Var,
        target_log: &ArrayD<S>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var, Var)> {
        let (z1, r1) = self.encode_graph(g, ps, view1, dropout_rng.as_deref_mut())?;
        let (z2, r2) = self.encode_graph(g, ps, view2, dropout_rng.as_deref_mut())?;
        let d1 = self.decode_graph(g, ps, z1)?;
        let d2 = self.decode_graph(g, ps, z2)?;
        let m1 = g.mse_to_const(d1, target_log);
        let m2 = g.mse_to_const(d2, target_log);
        let half = S::from_f64(0.5);
        let rec = g.add_weighted(m1, half, m2, half);
        let cl = g.info_nce(r1, r2, self.cfg.temperature);
        let total = g.add(rec, g.scale(cl, S::from_f64(self.cfg.beta)));
        Ok((total, rec, cl))
    }
}

impl LeddAutoencoder<f32> {
    /// Encodes one log-scale series into its treatment embedding.
    pub fn encode(&self, series: &LEDDSeries) -> Result<TreatmentEmbedding> {
        if series.scale != DoseScale::Log1p {
            return Err(DatError::validation("encode expects a log1p-scale series"));
        }
        if series.doses.len() != self.cfg.sequence_length {
            return Err(DatError::validation(format!(
                "expected {} months, got {}",
                self.cfg.sequence_length,
                series.doses.len()
            )));
        }
        let g = Graph::<f32>::no_grad();
        let x = g.input(
            Array2::from_shape_vec((1, series.doses.len()), series.doses.clone())
                .expect("shape matches length")
                .into_dyn(),
        );
        let (z, r) = self.encode_graph(&g, &self.params, x, None)?;
        let zv = g.value(z).to_owned();
        let rv = g.value(r).to_owned();
        let t = self.cfg.sequence_length;
        let l = self.cfg.latent_dim;
        let sequence_latent =
            Array2::from_shape_vec((t, l), zv.iter().copied().collect()).expect("z shape");
        let pooled = Array1::from_vec(rv.iter().copied().collect());
        Ok(TreatmentEmbedding {
            sequence_latent,
            pooled,
        })
    }

    /// Decodes a latent matrix back into a log-scale series.
    pub fn decode(&self, z: &Array2<f32>) -> Result<LEDDSeries> {
        let (t, l) = (self.cfg.sequence_length, self.cfg.latent_dim);
        if z.dim() != (t, l) {
            return Err(DatError::validation(format!(
                "latent must be {t}×{l}, got {:?}",
                z.dim()
            )));
        }
        let g = Graph::<f32>::no_grad();
        let zv = g.input(z.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let d = self.decode_graph(&g, &self.params, zv)?;
        let out = g.value(d);
        Ok(LEDDSeries {
            doses: out.iter().copied().collect(),
            scale: DoseScale::Log1p,
        })
    }

    /// Evaluates the joint loss on a batch of raw series, drawing the two
    /// stochastic views from `rng` (no gradients).
    pub fn autoencoder_loss(
        &self,
        batch: &[LEDDSeries],
        rng: &mut ChaCha8Rng,
    ) -> Result<LossParts> {
        let (v1, v2, target) = build_views(batch, self.cfg.sequence_length, rng)?;
        let g = Graph::<f32>::no_grad();
        let (total, rec, cl) = self.loss_graph(
            &g,
            &self.params,
            g.input(v1.into_dyn()),
            g.input(v2.into_dyn()),
            &target.into_dyn(),
            None,
        )?;
        Ok(LossParts {
            total: g.scalar_value(total) as f64,
            rec: g.scalar_value(rec) as f64,
            cl: g.scalar_value(cl) as f64,
        })
    }
}

/// The joint objective: `L_total = L_rec + β · L_CL`.
pub fn combine_loss(l_rec: f64, l_cl: f64, beta: f64) -> f64 {
    l_rec + beta * l_cl
}

/// Components of the joint loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub cl: f64,
}

/// Symmetric NT-Xent loss over two batches of pooled embeddings.
///
/// Rows must be unit-norm (zero rows are rejected); anchors see their
/// counterpart view as the positive and the other `2B − 2` rows as negatives.
pub fn info_nce(pool1: &Array2<f32>, pool2: &Array2<f32>, temperature: f64) -> Result<f64> {
    if pool1.dim() != pool2.dim() {
        return Err(DatError::validation("batch shapes differ"));
    }
    if pool1.nrows() == 0 {
        return Err(DatError::validation("empty batch"));
    }
    if temperature <= 0.0 {
        return Err(DatError::config("temperature must be positive"));
    }
    let normalize = |m: &Array2<f32>| -> Result<Array2<f64>> {
        let mut out = m.mapv(|v| v as f64);
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                return Err(DatError::validation("zero-norm embedding row"));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(out)
    };
    let a = normalize(pool1)?;
    let b = normalize(pool2)?;
    let g = Graph::<f64>::no_grad();
    let loss = g.info_nce(g.input(a.into_dyn()), g.input(b.into_dyn()), temperature);
    Ok(g.scalar_value(loss))
}

/// Draws the two stochastic views of every series in the batch and packs them
/// (plus the uncorrupted log-scale target) into `(B, T)` arrays.
fn build_views(
    batch: &[LEDDSeries],
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f32>, Array2<f32>, Array2<f32>)> {
    if batch.is_empty() {
        return Err(DatError::validation("empty batch"));
    }
    let b = batch.len();
    let mut v1 = Array2::<f32>::zeros((b, t));
    let mut v2 = Array2::<f32>::zeros((b, t));
    let mut target = Array2::<f32>::zeros((b, t));
    for (i, series) in batch.iter().enumerate() {
        if series.scale != DoseScale::Raw {
            return Err(DatError::validation("training batch must be raw-scale"));
        }
        if series.doses.len() != t {
            return Err(DatError::validation(format!(
                "expected {t} months, got {}",
                series.doses.len()
            )));
        }
        let (a, c) = stochastic_modulate(series, rng);
        let al = a.to_log1p()?;
        let cl = c.to_log1p()?;
        let tl = series.to_log1p()?;
        for m in 0..t {
            v1[[i, m]] = al.doses[m];
            v2[[i, m]] = cl.doses[m];
            target[[i, m]] = tl.doses[m];
        }
    }
    Ok((v1, v2, target))
}

/// Per-epoch averages recorded during autoencoder training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub rec: f64,
    pub cl: f64,
}

/// Training options (defaults: batch 64, 100 epochs).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AutoencoderTrainOptions {
    fn default() -> Self {
        AutoencoderTrainOptions {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Trains the autoencoder on raw dose sequences.
///
/// Every epoch applies one block perturbation per sequence (dataset level),
/// then draws the two modulated views per batch. Deterministic for a fixed
/// seed: every random draw comes from per-epoch streams derived from it.
pub fn train_autoencoder(
    sequences: &[LEDDSeries],
    cfg: &EncoderConfig,
    opts: &AutoencoderTrainOptions,
) -> Result<(LeddAutoencoder<f32>, Vec<EpochLoss>)> {
    cfg.validate()?;
    if sequences.len() < 2 {
        return Err(DatError::validation(
            "need at least 2 training sequences",
        ));
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(DatError::config("epochs and batch_size must be positive"));
    }
    let mut model = LeddAutoencoder::<f32>::new(cfg, derive_seed(opts.seed, &[0xA0]))?;
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            weight_decay: opts.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0xA1, epoch as u64]));
        let perturbed: Vec<LEDDSeries> = sequences
            .iter()
            .map(|s| block_perturb(s, &mut rng))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng);

        let (mut sum_total, mut sum_rec, mut sum_cl, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<LEDDSeries> = chunk.iter().map(|&i| perturbed[i].clone()).collect();
            let (v1, v2, _) = build_views(&batch, cfg.sequence_length, &mut rng)?;
            // Reconstruction targets the original series, not the perturbed one.
            let mut target = Array2::<f32>::zeros((chunk.len(), cfg.sequence_length));
            for (row, &i) in chunk.iter().enumerate() {
                let tl = sequences[i].to_log1p()?;
                for m in 0..cfg.sequence_length {
                    target[[row, m]] = tl.doses[m];
                }
            }
            let g = Graph::<f32>::new();
            let dropout_rng = &mut rng;
            let (total, rec, cl) = model.loss_graph(
                &g,
                &model.params,
                g.input(v1.into_dyn()),
                g.input(v2.into_dyn()),
                &target.into_dyn(),
                (cfg.dropout > 0.0).then_some(dropout_rng),
            )?;
            let (tv, rv, cv) = (
                g.scalar_value(total) as f64,
                g.scalar_value(rec) as f64,
                g.scalar_value(cl) as f64,
            );
            if !tv.is_finite() {
                return Err(DatError::internal(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            let grads = g.backward(total);
            opt.step(&mut model.params, &grads, opts.lr);
            sum_total += tv * chunk.len() as f64;
            sum_rec += rv * chunk.len() as f64;
            sum_cl += cv * chunk.len() as f64;
            n += chunk.len();
        }
        curve.push(EpochLoss {
            epoch,
            total: sum_total / n as f64,
            rec: sum_rec / n as f64,
            cl: sum_cl / n as f64,
        });
    }
    Ok((model, curve))
}
