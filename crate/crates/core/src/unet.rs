//! Attention-free conditional 2-D U-Net predicting the diffusion velocity.
//!
//! Spatial conditioning: the screening slice is channel-concatenated with the
//! noisy latent. Global conditioning: a sinusoidal timestep embedding is fused
//! additively with a linear projection of the pooled treatment embedding, and
//! every residual block modulates its feature maps with AdaGN scale/shift
//! heads driven by the fused vector.

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::VelocityModel;
use crate::error::{DatError, Result};
use crate::nn::{kaiming_uniform, uniform_bias, zeros, Graph, ParamId, ParamSet, Scalar, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Feature widths per resolution level (index 0 = full resolution).
    pub channels: Vec<usize>,
    /// Input channels: noisy latent plus screening slice.
    pub in_channels: usize,
    pub out_channels: usize,
    pub groupnorm_groups: usize,
    /// Width of the fused conditioning vector (also the sinusoid size).
    pub cond_dim: usize,
    /// Residual blocks per level (encoder and decoder alike).
    pub num_res_blocks: usize,
    /// Dimension of the pooled treatment embedding consumed by the model.
    pub treatment_dim: usize,
    /// Largest timestep the embedding accepts.
    pub t_max: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            channels: vec![128, 256, 512, 512],
            in_channels: 2,
            out_channels: 1,
            groupnorm_groups: 32,
            cond_dim: 256,
            num_res_blocks: 2,
            treatment_dim: 128,
            t_max: crate::diffusion::DEFAULT_T,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(DatError::config("channels must be non-empty"));
        }
        if self.in_channels != 2 {
            return Err(DatError::config(
                "in_channels must be 2 (noisy latent + screening slice)",
            ));
        }
        if self.out_channels != 1 {
            return Err(DatError::config("out_channels must be 1"));
        }
        for &c in &self.channels {
            if c % self.groupnorm_groups != 0 {
                return Err(DatError::config(format!(
                    "channel width {c} not divisible by {} groups",
                    self.groupnorm_groups
                )));
            }
        }
        if self.cond_dim % 2 != 0 {
            return Err(DatError::config("cond_dim must be even"));
        }
        if self.num_res_blocks == 0 {
            return Err(DatError::config("need at least one residual block"));
        }
        Ok(())
    }
}

/// Fixed sinusoidal features of a timestep.
///
/// Half the dimensions are sines, half cosines, over geometrically spaced
/// frequencies: `emb = [sin(t*w_i); cos(t*w_i)]`, `w_i = 10000^(-i/(d/2-1))`.
pub fn timestep_embedding<S: Scalar>(t: usize, dim: usize, t_max: usize) -> Result<Array1<S>> {
    if t > t_max {
        return Err(DatError::validation(format!(
            "timestep {t} outside [0, {t_max}]"
        )));
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(DatError::config("embedding dim must be even and >= 2"));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 10_000f64.powf(-exponent);
        let arg = t as f64 * freq;
        out[i] = S::from_f64(arg.sin());
        out[half + i] = S::from_f64(arg.cos());
    }
    Ok(out)
}

/// One AdaGN site: affine-free GroupNorm modulated by per-channel scale and
/// shift heads of the conditioning vector.
struct AdaGn {
    head_w: ParamId,
    head_b: ParamId,
    channels: usize,
}

impl AdaGn {
    fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, cond_dim: usize, channels: usize) -> Self {
        // Zero-initialized heads make the block start as plain GroupNorm.
        let head_w = ps.add(&format!("{name}.head.w"), zeros(&[cond_dim, 2 * channels]));
        let head_b = ps.add(&format!("{name}.head.b"), zeros(&[2 * channels]));
        AdaGn {
            head_w,
            head_b,
            channels,
        }
    }

    fn apply<S: Scalar>(
        &self,
        g: &Graph<S>,
        ps: &ParamSet<S>,
        h: Var,
        cond: Var,
        groups: usize,
    ) -> Var {
        let normed = g.group_norm(h, groups, 1e-5);
        let w = g.param(ps, self.head_w);
        let b = g.param(ps, self.head_b);
        let sb = g.linear(cond, w, Some(b));
        let scale = g.narrow(sb, 1, 0, self.channels);
        let shift = g.narrow(sb, 1, self.channels, self.channels);
        g.film(normed, scale, shift)
    }
}

struct ResBlock {
    adagn1: AdaGn,
    conv1_w: ParamId,
    conv1_b: ParamId,
    adagn2: AdaGn,
    conv2_w: ParamId,
    conv2_b: ParamId,
    skip_w: Option<ParamId>,
}

impl ResBlock {
    fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        cond_dim: usize,
    ) -> Self {
        let adagn1 = AdaGn::new(ps, &format!("{name}.adagn1"), cond_dim, c_in);
        let conv1_w = ps.add(
            &format!("{name}.conv1.w"),
            kaiming_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9),
        );
        let conv1_b = ps.add(
            &format!("{name}.conv1.b"),
            uniform_bias(rng, &[c_out], c_in * 9),
        );
        let adagn2 = AdaGn::new(ps, &format!("{name}.adagn2"), cond_dim, c_out);
        let conv2_w = ps.add(
            &format!("{name}.conv2.w"),
            kaiming_uniform(rng, &[c_out, c_out, 3, 3], c_out * 9),
        );
        let conv2_b = ps.add(
            &format!("{name}.conv2.b"),
            uniform_bias(rng, &[c_out], c_out * 9),
        );
        let skip_w = (c_in != c_out).then(|| {
            ps.add(
                &format!("{name}.skip.w"),
                kaiming_uniform(rng, &[c_out, c_in, 1, 1], c_in),
            )
        });
        ResBlock {
            adagn1,
            conv1_w,
            conv1_b,
            adagn2,
            conv2_w,
            conv2_b,
            skip_w,
        }
    }

    fn forward<S: Scalar>(
        &self,
        g: &Graph<S>,
        ps: &ParamSet<S>,
        h: Var,
        cond: Var,
        groups: usize,
    ) -> Var {
        let mut y = self.adagn1.apply(g, ps, h, cond, groups);
        y = g.silu(y);
        y = g.conv2d(y, g.param(ps, self.conv1_w), Some(g.param(ps, self.conv1_b)), 1, 1);
        y = self.adagn2.apply(g, ps, y, cond, groups);
        y = g.silu(y);
        y = g.conv2d(y, g.param(ps, self.conv2_w), Some(g.param(ps, self.conv2_b)), 1, 1);
        let skip = match self.skip_w {
            Some(w) => g.conv2d(h, g.param(ps, w), None, 1, 0),
            None => h,
        };
        g.add(skip, y)
    }
}

struct Transition {
    w: ParamId,
    b: ParamId,
}

/// The v-predicting conditional U-Net.
pub struct UNet<S: Scalar> {
    pub cfg: UNetConfig,
    pub params: ParamSet<S>,
    stem_w: ParamId,
    stem_b: ParamId,
    enc: Vec<Vec<ResBlock>>,
    down: Vec<Transition>,
    mid: Vec<ResBlock>,
    up: Vec<Transition>,
    dec: Vec<Vec<ResBlock>>,
    out_w: ParamId,
    out_b: ParamId,
    t_mlp_w1: ParamId,
    t_mlp_b1: ParamId,
    t_mlp_w2: ParamId,
    t_mlp_b2: ParamId,
    treat_w: ParamId,
}

impl<S: Scalar> UNet<S> {
    pub fn new(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps: ParamSet<S> = ParamSet::new();
        let ch = &cfg.channels;
        let levels = cfg.levels();
        let cd = cfg.cond_dim;

        let stem_w = ps.add(
            "stem.w",
            kaiming_uniform(&mut rng, &[ch[0], cfg.in_channels, 3, 3], cfg.in_channels * 9),
        );
        let stem_b = ps.add("stem.b", uniform_bias(&mut rng, &[ch[0]], cfg.in_channels * 9));

        let t_mlp_w1 = ps.add("cond.t.w1", kaiming_uniform(&mut rng, &[cd, cd], cd));
        let t_mlp_b1 = ps.add("cond.t.b1", uniform_bias(&mut rng, &[cd], cd));
        let t_mlp_w2 = ps.add("cond.t.w2", kaiming_uniform(&mut rng, &[cd, cd], cd));
        let t_mlp_b2 = ps.add("cond.t.b2", uniform_bias(&mut rng, &[cd], cd));
        let treat_w = ps.add(
            "cond.treat.w",
            kaiming_uniform(&mut rng, &[cfg.treatment_dim, cd], cfg.treatment_dim),
        );

        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..levels {
            let mut blocks = Vec::new();
            for b in 0..cfg.num_res_blocks {
                blocks.push(ResBlock::new(
                    &mut ps,
                    &mut rng,
                    &format!("enc.{i}.{b}"),
                    ch[i],
                    ch[i],
                    cd,
                ));
            }
            enc.push(blocks);
            if i + 1 < levels {
                let w = ps.add(
                    &format!("down.{i}.w"),
                    kaiming_uniform(&mut rng, &[ch[i + 1], ch[i], 3, 3], ch[i] * 9),
                );
                let b = ps.add(
                    &format!("down.{i}.b"),
                    uniform_bias(&mut rng, &[ch[i + 1]], ch[i] * 9),
                );
                down.push(Transition { w, b });
            }
        }

        let top = *ch.last().unwrap();
        let mid = (0..2)
            .map(|b| ResBlock::new(&mut ps, &mut rng, &format!("mid.{b}"), top, top, cd))
            .collect();

        let mut up = Vec::new();
        let mut dec = Vec::new();
        for i in (0..levels).rev() {
            let mut blocks = Vec::new();
            for b in 0..cfg.num_res_blocks {
                let c_in = if b == 0 { ch[i] * 2 } else { ch[i] };
                blocks.push(ResBlock::new(
                    &mut ps,
                    &mut rng,
                    &format!("dec.{i}.{b}"),
                    c_in,
                    ch[i],
                    cd,
                ));
            }
            dec.push(blocks);
            if i > 0 {
                let w = ps.add(
                    &format!("up.{i}.w"),
                    kaiming_uniform(&mut rng, &[ch[i - 1], ch[i], 3, 3], ch[i] * 9),
                );
                let b = ps.add(
                    &format!("up.{i}.b"),
                    uniform_bias(&mut rng, &[ch[i - 1]], ch[i] * 9),
                );
                up.push(Transition { w, b });
            }
        }

        // Zero-initialized head: the network starts by predicting v = 0.
        let out_w = ps.add("out.w", zeros(&[cfg.out_channels, ch[0], 3, 3]));
        let out_b = ps.add("out.b", zeros(&[cfg.out_channels]));

        Ok(UNet {
            cfg: cfg.clone(),
            params: ps,
            stem_w,
            stem_b,
            enc,
            down,
            mid,
            up,
            dec,
            out_w,
            out_b,
            t_mlp_w1,
            t_mlp_b1,
            t_mlp_w2,
            t_mlp_b2,
            treat_w,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Fused conditioning vector: `MLP(t_emb) + W_r . r`, one row per item.
    pub fn fuse_conditioning(
        &self,
        g: &Graph<S>,
        ts: &[usize],
        treatment: Var,
    ) -> Result<Var> {
        let cd = self.cfg.cond_dim;
        let mut emb = Array2::<S>::zeros((ts.len(), cd));
        for (row, &t) in ts.iter().enumerate() {
            let e = timestep_embedding::<S>(t, cd, self.cfg.t_max)?;
            emb.row_mut(row).assign(&e);
        }
        let t_in = g.input(emb.into_dyn());
        let h = g.linear(
            t_in,
            g.param(&self.params, self.t_mlp_w1),
            Some(g.param(&self.params, self.t_mlp_b1)),
        );
        let h = g.silu(h);
        let t_part = g.linear(
            h,
            g.param(&self.params, self.t_mlp_w2),
            Some(g.param(&self.params, self.t_mlp_b2)),
        );
        let r_part = g.matmul(treatment, g.param(&self.params, self.treat_w));
        Ok(g.add(t_part, r_part))
    }

    /// Full forward pass on graph variables.
    ///
    /// `x_t`, `condition`: `(B, 1, H, W)`; `ts`: one timestep per item;
    /// `treatment`: `(B, treatment_dim)`. Returns v̂ as `(B, 1, H, W)`.
    pub fn forward_graph(
        &self,
        g: &Graph<S>,
        x_t: Var,
        condition: Var,
        ts: &[usize],
        treatment: Var,
    ) -> Result<Var> {
        let xs = g.shape(x_t);
        if xs.len() != 4 || xs[1] != 1 {
            return Err(DatError::validation("x_t must be (B, 1, H, W)"));
        }
        if g.shape(condition) != xs {
            return Err(DatError::validation("condition shape must match x_t"));
        }
        if ts.len() != xs[0] {
            return Err(DatError::validation("one timestep per batch item"));
        }
        let tshape = g.shape(treatment);
        if tshape != [xs[0], self.cfg.treatment_dim] {
            return Err(DatError::validation(format!(
                "treatment must be (B, {})",
                self.cfg.treatment_dim
            )));
        }
        let ps = &self.params;
        let groups = self.cfg.groupnorm_groups;
        let cond = self.fuse_conditioning(g, ts, treatment)?;

        let x = g.concat(1, x_t, condition);
        let mut h = g.conv2d(x, g.param(ps, self.stem_w), Some(g.param(ps, self.stem_b)), 1, 1);

        let mut skips = Vec::with_capacity(self.enc.len());
        for (i, blocks) in self.enc.iter().enumerate() {
            for blk in blocks {
                h = blk.forward(g, ps, h, cond, groups);
            }
            skips.push(h);
            if i < self.down.len() {
                let tr = &self.down[i];
                h = g.conv2d(h, g.param(ps, tr.w), Some(g.param(ps, tr.b)), 2, 1);
            }
        }

        for blk in &self.mid {
            h = blk.forward(g, ps, h, cond, groups);
        }

        for (d, blocks) in self.dec.iter().enumerate() {
            let level = self.enc.len() - 1 - d;
            h = g.concat(1, h, skips[level]);
            for blk in blocks {
                h = blk.forward(g, ps, h, cond, groups);
            }
            if level > 0 {
                let tr = &self.up[d];
                h = g.upsample_nearest_2x(h);
                h = g.conv2d(h, g.param(ps, tr.w), Some(g.param(ps, tr.b)), 1, 1);
            }
        }

        h = g.group_norm(h, groups, 1e-5);
        h = g.silu(h);
        Ok(g.conv2d(h, g.param(ps, self.out_w), Some(g.param(ps, self.out_b)), 1, 1))
    }
}

impl VelocityModel for UNet<f32> {
    fn predict_v(
        &self,
        x_t: &Array4<f32>,
        condition: &Array4<f32>,
        t: usize,
        treatment: &Array2<f32>,
    ) -> Result<Array4<f32>> {
        if self.params.iter().any(|(_, v)| v.iter().any(|p| !p.is_finite())) {
            return Err(DatError::internal("model weights contain non-finite values"));
        }
        let g = Graph::<f32>::no_grad();
        let xv = g.input(x_t.clone().into_dyn());
        let cv = g.input(condition.clone().into_dyn());
        let tv = g.input(treatment.clone().into_dyn());
        let ts = vec![t; x_t.shape()[0]];
        let out = self.forward_graph(&g, xv, cv, &ts, tv)?;
        let val: ArrayD<f32> = g.value(out).to_owned();
        val.into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| DatError::internal("unexpected output rank"))
    }
}

/// Summary of a trained model, exported next to checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCard {
    pub config: UNetConfig,
    pub param_count: usize,
    pub training_seed: u64,
    pub schedule_hash: String,
}
