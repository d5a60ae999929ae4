//! AdamW with decoupled weight decay.

use ndarray::{ArrayD, Zip};

use super::graph::Gradients;
use super::{ParamSet, Scalar};

/// Hyperparameters for [`AdamW`]. The learning rate is passed per step so a
/// schedule can drive it.
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW optimizer state (first/second moments plus the step counter).
pub struct AdamW<S> {
    cfg: AdamWConfig,
    ids: Vec<super::ParamId>,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamSet<S>, cfg: AdamWConfig) -> Self {
        let ids: Vec<_> = params.ids().collect();
        let m = ids
            .iter()
            .map(|&id| ArrayD::zeros(params.get(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            cfg,
            ids,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    /// Applies one update: `w -= lr * (m̂ / (sqrt(v̂) + eps) + wd * w)`.
    ///
    /// Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &Gradients<S>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.cfg.beta2);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let eps = S::from_f64(self.cfg.eps);
        let lr_s = S::from_f64(lr);
        let wd = S::from_f64(self.cfg.weight_decay);

        for (i, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let w = params.get_mut(id);
            Zip::from(&mut self.m[i])
                .and(g)
                .for_each(|m, &gg| *m = b1 * *m + one_m_b1 * gg);
            Zip::from(&mut self.v[i])
                .and(g)
                .for_each(|v, &gg| *v = b2 * *v + one_m_b2 * gg * gg);
            Zip::from(w)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|w, &m, &v| {
                    let mhat = m * inv_bc1;
                    let vhat = v * inv_bc2;
                    *w = *w - lr_s * (mhat / (vhat.sqrt() + eps) + wd * *w);
                });
        }
    }

    /// Moment tensors and step counter, for checkpointing.
    pub fn state(&self) -> (&[ArrayD<S>], &[ArrayD<S>], u64) {
        (&self.m, &self.v, self.step)
    }

    /// Restores state captured by [`AdamW::state`].
    pub fn restore(&mut self, m: Vec<ArrayD<S>>, v: Vec<ArrayD<S>>, step: u64) {
        assert_eq!(m.len(), self.m.len(), "optimizer state length mismatch");
        assert_eq!(v.len(), self.v.len(), "optimizer state length mismatch");
        for (a, b) in self.m.iter().zip(&m) {
            assert_eq!(a.shape(), b.shape(), "optimizer state shape mismatch");
        }
        self.m = m;
        self.v = v;
        self.step = step;
    }
}
