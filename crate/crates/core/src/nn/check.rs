//! Finite-difference validation of the engine's hand-derived backwards.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamSet, Var};

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Number of parameter coordinates compared.
    pub checked: usize,
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst error.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `forward` must rebuild the same scalar loss from the current parameter
/// values every time it is called (inputs should be captured by the closure).
/// For each parameter, up to `samples_per_param` coordinates are perturbed by
/// `±h` (central differences in `f64`). The relative error denominator is
/// floored at `1e-6` so near-zero gradient pairs do not blow up the ratio.
pub fn grad_check(
    params: &mut ParamSet<f64>,
    mut forward: impl FnMut(&Graph<f64>, &ParamSet<f64>) -> Var,
    samples_per_param: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport {
    let graph = Graph::<f64>::new();
    let loss = forward(&graph, params);
    assert_eq!(graph.value(loss).len(), 1, "grad_check needs a scalar loss");
    let grads = graph.backward(loss);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };

    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let len = params.get(*id).len();
        if len == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let k = samples_per_param.min(len);
        let coords = sample(&mut rng, len, k);
        for coord in coords {
            let orig = params.get(*id).as_slice().unwrap()[coord];

            params.get_mut(*id).as_slice_mut().unwrap()[coord] = orig + h;
            let gp = Graph::<f64>::no_grad();
            let lp = gp.scalar_value(forward(&gp, params));

            params.get_mut(*id).as_slice_mut().unwrap()[coord] = orig - h;
            let gm = Graph::<f64>::no_grad();
            let lm = gm.scalar_value(forward(&gm, params));

            params.get_mut(*id).as_slice_mut().unwrap()[coord] = orig;

            let fd = (lp - lm) / (2.0 * h);
            let analytic = grads
                .get(*id)
                .map(|g| g.as_standard_layout().as_slice().unwrap()[coord])
                .unwrap_or(0.0);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            let rel = (analytic - fd).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.name(*id).to_string(), coord, analytic, fd));
            }
        }
    }
    report
}
