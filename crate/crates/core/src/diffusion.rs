//! Diffusion core: squared-cosine noise schedule with zero terminal SNR,
//! forward corruption, v-parameterization algebra, the deterministic reverse
//! sampler, and EMA tracking of model weights.

use ndarray::{Array, Array2, Array4, Dimension};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DatError, Result};
use crate::nn::{ParamSet, Scalar};

/// Default number of diffusion timesteps.
pub const DEFAULT_T: usize = 1000;
/// Default number of reverse sampling steps.
pub const DEFAULT_SAMPLE_STEPS: usize = 250;
/// Offset constant of the squared-cosine cumulative signal curve.
pub const COSINE_OFFSET: f64 = 0.008;

/// Variance-preserving noise schedule: `x_t = alpha_t * x0 + sigma_t * eps`.
///
/// Both coefficient vectors have `t_max + 1` entries indexed by timestep.
/// After the terminal rescale, `alpha[t_max] == 0` exactly, so the terminal
/// latent carries no signal.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(DatError::validation(format!(
                "timestep {t} outside [0, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    /// CSV dump `t,alpha,sigma` with full float precision, for golden tests.
    /// Exponents are zero-padded to two digits with an explicit sign
    /// (`1.00000000000000000e+00`) so dumps are stable across toolchains.
    pub fn to_csv(&self) -> String {
        fn sci17(x: f64) -> String {
            let s = format!("{x:.17e}");
            let (mantissa, exp) = s.split_once('e').expect("float formats with exponent");
            let (sign, digits) = match exp.strip_prefix('-') {
                Some(d) => ('-', d),
                None => ('+', exp),
            };
            format!("{mantissa}e{sign}{digits:0>2}")
        }
        let mut out = String::from("t,alpha,sigma\n");
        for t in 0..=self.t_max {
            out.push_str(&format!(
                "{t},{},{}\n",
                sci17(self.alphas[t]),
                sci17(self.sigmas[t])
            ));
        }
        out
    }

    /// Hash of the CSV dump, recorded in model cards and checkpoints so a
    /// sampler never runs against weights trained under a different schedule.
    pub fn hash(&self) -> String {
        crate::util::sha256_hex(self.to_csv().as_bytes())
    }
}

/// Builds the squared-cosine schedule and rescales it to zero terminal SNR.
///
/// The cumulative signal curve is `f(t) = cos^2(pi/2 * (t/T + s)/(1 + s))`
/// with `s = 0.008`; `alpha_t = sqrt(f(t)/f(0))`. The terminal rescale maps
/// `alpha_t <- (alpha_t - alpha_T) * alpha_0 / (alpha_0 - alpha_T)`, which
/// pins `alpha_T = 0` exactly while leaving `alpha_0` (and so the initial
/// SNR) unchanged. Sigmas follow from variance preservation.
pub fn make_schedule(t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(DatError::validation("schedule needs T >= 2"));
    }
    let f = |t: f64| {
        let arg = std::f64::consts::FRAC_PI_2 * (t / t_max as f64 + COSINE_OFFSET)
            / (1.0 + COSINE_OFFSET);
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut alphas: Vec<f64> = (0..=t_max)
        .map(|t| (f(t as f64) / f0).max(0.0).sqrt())
        .collect();
    let a0 = alphas[0];
    let at = alphas[t_max];
    let scale = a0 / (a0 - at);
    for a in &mut alphas {
        *a = (*a - at) * scale;
    }
    alphas[t_max] = 0.0; // exact, not just up to rounding
    let sigmas: Vec<f64> = alphas
        .iter()
        .map(|&a| (1.0 - a * a).max(0.0).sqrt())
        .collect();
    Ok(NoiseSchedule {
        t_max,
        alphas,
        sigmas,
    })
}

/// Forward corruption: `x_t = alpha_t * x0 + sigma_t * eps`.
pub fn q_sample<S: Scalar, D: Dimension>(
    x0: &Array<S, D>,
    t: usize,
    eps: &Array<S, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<S, D>> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(DatError::validation("x0 and eps shapes differ"));
    }
    let a = S::from_f64(schedule.alpha(t));
    let s = S::from_f64(schedule.sigma(t));
    Ok(ndarray::Zip::from(x0)
        .and(eps)
        .map_collect(|&x, &e| a * x + s * e))
}

/// Velocity target: `v_t = alpha_t * eps - sigma_t * x0`.
pub fn velocity_target<S: Scalar, D: Dimension>(
    x0: &Array<S, D>,
    eps: &Array<S, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<S, D>> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(DatError::validation("x0 and eps shapes differ"));
    }
    let a = S::from_f64(schedule.alpha(t));
    let s = S::from_f64(schedule.sigma(t));
    Ok(ndarray::Zip::from(x0)
        .and(eps)
        .map_collect(|&x, &e| a * e - s * x))
}

/// Inverts the v-parameterization:
/// `x0_hat = alpha_t * x_t - sigma_t * v`, `eps_hat = sigma_t * x_t + alpha_t * v`.
pub fn x0_and_eps_from_v<S: Scalar, D: Dimension>(
    x_t: &Array<S, D>,
    v: &Array<S, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Array<S, D>, Array<S, D>)> {
    schedule.check_t(t)?;
    if x_t.shape() != v.shape() {
        return Err(DatError::validation("x_t and v shapes differ"));
    }
    let a = S::from_f64(schedule.alpha(t));
    let s = S::from_f64(schedule.sigma(t));
    let x0 = ndarray::Zip::from(x_t)
        .and(v)
        .map_collect(|&x, &vv| a * x - s * vv);
    let eps = ndarray::Zip::from(x_t)
        .and(v)
        .map_collect(|&x, &vv| s * x + a * vv);
    Ok((x0, eps))
}

/// A v-predicting denoiser usable by the sampler.
pub trait VelocityModel {
    /// Predicts v̂ for a batch of latents `(B, 1, H, W)` at shared timestep
    /// `t`, given the screening condition `(B, 1, H, W)` and pooled treatment
    /// embeddings `(B, R)`.
    fn predict_v(
        &self,
        x_t: &Array4<f32>,
        condition: &Array4<f32>,
        t: usize,
        treatment: &Array2<f32>,
    ) -> Result<Array4<f32>>;
}

/// The `steps + 1` timestep nodes visited by the sampler, from `T` down to 0,
/// uniformly spaced (rounded to integers) and always including both ends.
pub fn sample_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_max {
        return Err(DatError::validation(format!(
            "steps must lie in [1, {t_max}]"
        )));
    }
    Ok((0..=steps)
        .map(|j| ((t_max as f64) * (1.0 - j as f64 / steps as f64)).round() as usize)
        .collect())
}

/// Deterministic reverse process from a provided terminal latent.
///
/// Each step queries the model for v̂ at the current node, inverts it to
/// `(x0_hat, eps_hat)`, clamps `x0_hat` to `[-1, 1]`, and re-mixes at the next
/// node's `(alpha, sigma)`. No noise is injected, so the output is a pure
/// function of `(x_init, condition, treatment, weights)`.
pub fn sample_from<M: VelocityModel>(
    model: &M,
    condition: &Array4<f32>,
    treatment: &Array2<f32>,
    schedule: &NoiseSchedule,
    steps: usize,
    x_init: Array4<f32>,
) -> Result<Array4<f32>> {
    if x_init.shape() != condition.shape() {
        return Err(DatError::validation(
            "terminal latent and condition shapes differ",
        ));
    }
    let nodes = sample_timesteps(schedule.t_max, steps)?;
    let mut x = x_init;
    for w in nodes.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let v = model.predict_v(&x, condition, t, treatment)?;
        if v.iter().any(|p| !p.is_finite()) {
            return Err(DatError::internal(format!(
                "model produced non-finite v at t={t}"
            )));
        }
        let (mut x0_hat, eps_hat) = x0_and_eps_from_v(&x, &v, t, schedule)?;
        x0_hat.mapv_inplace(|p| p.clamp(-1.0, 1.0));
        let a_next = schedule.alpha(t_next) as f32;
        let s_next = schedule.sigma(t_next) as f32;
        x = ndarray::Zip::from(&x0_hat)
            .and(&eps_hat)
            .map_collect(|&x0, &e| a_next * x0 + s_next * e);
    }
    Ok(x)
}

/// Reverse process seeded from `x_T ~ N(0, 1)` drawn with the given RNG.
pub fn sample<M: VelocityModel, R: Rng>(
    model: &M,
    condition: &Array4<f32>,
    treatment: &Array2<f32>,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Array4<f32>> {
    let mut x_init = Array4::<f32>::zeros(condition.raw_dim());
    for v in x_init.iter_mut() {
        *v = rng.sample::<f32, _>(StandardNormal);
    }
    sample_from(model, condition, treatment, schedule, steps, x_init)
}

// ---- EMA -------------------------------------------------------------------

/// Exponential moving average of model weights.
#[derive(Clone, Debug)]
pub struct EmaState<S> {
    pub decay: f64,
    pub updates: u64,
    pub shadow: Vec<ndarray::ArrayD<S>>,
}

impl<S: Scalar> EmaState<S> {
    /// Initializes the shadow as a copy of the current weights.
    pub fn new(params: &ParamSet<S>, decay: f64) -> Self {
        EmaState {
            decay,
            updates: 0,
            shadow: params.clone_values(),
        }
    }

    /// The warmup-adjusted decay for the next update,
    /// `min(decay, (1 + n) / (10 + n))`.
    ///
    /// Early in training the shadow would otherwise remain dominated by the
    /// random initialization for ~1/(1-decay) steps; ramping the decay makes
    /// short runs usable while converging to the configured value.
    pub fn warmup_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    /// Applies one warmup-scheduled EMA update (what the training loop calls).
    pub fn update_warmup(&mut self, params: &ParamSet<S>) -> Result<()> {
        let d = self.warmup_decay();
        ema_update_with_decay(self, params, d)
    }

    /// Copies the shadow weights into a parameter set (for EMA sampling).
    pub fn write_to(&self, params: &mut ParamSet<S>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(DatError::validation("EMA/model tensor count mismatch"));
        }
        for (id, sh) in params.ids().collect::<Vec<_>>().into_iter().zip(&self.shadow) {
            if params.get(id).shape() != sh.shape() {
                return Err(DatError::validation("EMA/model tensor shape mismatch"));
            }
            params.set(id, sh.clone());
        }
        Ok(())
    }
}

/// One EMA step at the state's configured decay:
/// `shadow <- decay * shadow + (1 - decay) * weights`.
pub fn ema_update<S: Scalar>(state: &mut EmaState<S>, params: &ParamSet<S>) -> Result<()> {
    let d = state.decay;
    ema_update_with_decay(state, params, d)
}

fn ema_update_with_decay<S: Scalar>(
    state: &mut EmaState<S>,
    params: &ParamSet<S>,
    decay: f64,
) -> Result<()> {
    if params.len() != state.shadow.len() {
        return Err(DatError::validation("EMA/model tensor count mismatch"));
    }
    let d = S::from_f64(decay);
    let omd = S::from_f64(1.0 - decay);
    for (id, sh) in params
        .ids()
        .collect::<Vec<_>>()
        .into_iter()
        .zip(state.shadow.iter_mut())
    {
        let w = params.get(id);
        if w.shape() != sh.shape() {
            return Err(DatError::validation("EMA/model tensor shape mismatch"));
        }
        ndarray::Zip::from(sh)
            .and(w)
            .for_each(|s, &wv| *s = d * *s + omd * wv);
    }
    state.updates += 1;
    Ok(())
}
