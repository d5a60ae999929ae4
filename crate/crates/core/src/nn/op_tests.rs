//! Gradient and value tests for every operator in the engine.
//!
//! Each op's hand-derived backward is compared against central finite
//! differences in `f64`; value semantics are checked against independent
//! naive implementations.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{grad_check, Graph, ParamSet, Var};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Builds random parameters with the given shapes, closes the op under an MSE
/// loss against a fixed random target, and finite-difference-checks it.
fn check_op(seed: u64, shapes: &[&[usize]], build: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps: ParamSet<f64> = ParamSet::new();
    for (i, s) in shapes.iter().enumerate() {
        let v = randn(&mut rng, s, 0.7);
        ps.add(&format!("p{i}"), v);
    }
    let out_shape = {
        let g = Graph::<f64>::no_grad();
        let vars: Vec<Var> = ps.ids().map(|id| g.param(&ps, id)).collect();
        g.shape(build(&g, &vars))
    };
    let target = randn(&mut rng, &out_shape, 1.0);
    let report = grad_check(
        &mut ps,
        |g, ps| {
            let vars: Vec<Var> = ps.ids().map(|id| g.param(ps, id)).collect();
            let out = build(g, &vars);
            g.mse_to_const(out, &target)
        },
        8,
        1e-5,
        seed ^ 0x5eed,
    );
    assert!(
        report.passes(1e-4),
        "gradient mismatch (seed {seed}): {:?}",
        report.worst
    );
}

#[test]
fn grads_elementwise() {
    check_op(11, &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_op(12, &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check_op(13, &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op(14, &[&[5]], |g, v| g.scale(v[0], -1.7));
    check_op(15, &[&[5]], |g, v| g.add_scalar(v[0], 0.3));
    check_op(16, &[&[2, 3], &[2, 3]], |g, v| {
        g.add_weighted(v[0], 0.25, v[1], -2.0)
    });
    check_op(17, &[&[4, 4]], |g, v| g.silu(v[0]));
    check_op(18, &[&[4, 4]], |g, v| g.gelu(v[0]));
}

#[test]
fn grads_shape_ops() {
    check_op(21, &[&[2, 3, 4]], |g, v| g.reshape(v[0], &[6, 4]));
    check_op(22, &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_op(23, &[&[3, 7]], |g, v| g.narrow(v[0], 1, 2, 4));
    check_op(24, &[&[2, 3], &[2, 5]], |g, v| g.concat(1, v[0], v[1]));
    check_op(25, &[&[3, 4]], |g, v| {
        let m = g.mean_all(v[0]);
        g.reshape(m, &[1])
    });
}

#[test]
fn grads_dense() {
    check_op(31, &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
    check_op(32, &[&[3, 4], &[4, 5], &[5]], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
    check_op(33, &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false));
    check_op(34, &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true));
    check_op(35, &[&[3, 6]], |g, v| g.softmax_last(v[0]));
}

#[test]
fn grads_norms() {
    check_op(41, &[&[4, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check_op(42, &[&[2, 4, 3, 3]], |g, v| g.group_norm(v[0], 2, 1e-5));
    check_op(43, &[&[3, 5]], |g, v| g.l2_normalize_rows(v[0], 1e-12));
}

#[test]
fn grads_conv_and_spatial() {
    check_op(51, &[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    });
    check_op(52, &[&[2, 3, 7, 7], &[4, 3, 3, 3], &[4]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    });
    check_op(53, &[&[2, 3, 5, 5], &[4, 3, 1, 1], &[4]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 0)
    });
    check_op(54, &[&[1, 2, 4, 4], &[3, 2, 5, 5]], |g, v| {
        g.conv2d(v[0], v[1], None, 1, 2)
    });
    check_op(55, &[&[2, 3, 3, 3]], |g, v| g.upsample_nearest_2x(v[0]));
    check_op(56, &[&[2, 3, 4, 4], &[2, 3], &[2, 3]], |g, v| {
        g.film(v[0], v[1], v[2])
    });
}

#[test]
fn grads_rows_and_reductions() {
    check_op(61, &[&[3, 5, 4]], |g, v| g.mean_axis1(v[0]));
    check_op(62, &[&[3, 5, 4], &[5, 4]], |g, v| {
        g.add_broadcast_rows(v[0], v[1])
    });
    check_op(63, &[&[4, 3], &[3, 5], &[5]], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        g.add_bias_rows(y, v[2])
    });
}

#[test]
fn grads_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let target = randn(&mut rng, &[3, 4, 4], 0.9);
    let weights = randn(&mut rng, &[3, 4, 4], 0.0).mapv(|_| rng.random_range(0.1..1.0));
    {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("x", randn(&mut rng, &[3, 4, 4], 1.0));
        let t = target.clone();
        let report = grad_check(
            &mut ps,
            |g, ps| {
                let x = g.param(ps, ps.id_of("x").unwrap());
                g.mse_to_const(x, &t)
            },
            20,
            1e-5,
            99,
        );
        assert!(report.passes(1e-4), "mse: {:?}", report.worst);
    }
    {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("x", randn(&mut rng, &[3, 4, 4], 1.0));
        let (t, w) = (target.clone(), weights.clone());
        let report = grad_check(
            &mut ps,
            |g, ps| {
                let x = g.param(ps, ps.id_of("x").unwrap());
                g.weighted_l1_to_const(x, &t, &w)
            },
            20,
            1e-5,
            100,
        );
        assert!(report.passes(1e-4), "weighted_l1: {:?}", report.worst);
    }
    {
        // Raw (unnormalized) embeddings exercise the dot-product form.
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("z1", randn(&mut rng, &[4, 6], 0.8));
        ps.add("z2", randn(&mut rng, &[4, 6], 0.8));
        let report = grad_check(
            &mut ps,
            |g, ps| {
                let a = g.param(ps, ps.id_of("z1").unwrap());
                let b = g.param(ps, ps.id_of("z2").unwrap());
                g.info_nce(a, b, 0.2)
            },
            24,
            1e-6,
            101,
        );
        assert!(report.passes(1e-4), "info_nce: {:?}", report.worst);
    }
    {
        // And through row normalization, as the encoder uses it.
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("z1", randn(&mut rng, &[3, 5], 0.8));
        ps.add("z2", randn(&mut rng, &[3, 5], 0.8));
        let report = grad_check(
            &mut ps,
            |g, ps| {
                let a = g.param(ps, ps.id_of("z1").unwrap());
                let b = g.param(ps, ps.id_of("z2").unwrap());
                let an = g.l2_normalize_rows(a, 1e-12);
                let bn = g.l2_normalize_rows(b, 1e-12);
                g.info_nce(an, bn, 0.2)
            },
            15,
            1e-6,
            102,
        );
        assert!(report.passes(1e-4), "info_nce+norm: {:?}", report.worst);
    }
}

// ---- value semantics ----------------------------------------------------

/// Naive direct convolution used as the reference implementation.
fn conv2d_naive(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: Option<&ArrayD<f64>>,
    stride: usize,
    padding: usize,
) -> ArrayD<f64> {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, cout, ho, wo]));
    for bi in 0..bs {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map(|bb| bb[[co]]).unwrap_or(0.0);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x[[bi, ci, iy as usize, ix as usize]]
                                        * w[[co, ci, ky, kx]];
                                }
                            }
                        }
                    }
                    out[[bi, co, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(cin, cout, h, w, kh, stride, padding) in &[
        (3usize, 4usize, 6usize, 6usize, 3usize, 1usize, 1usize),
        (3, 4, 7, 6, 3, 2, 1),
        (2, 5, 5, 5, 1, 1, 0),
        (1, 2, 8, 8, 5, 1, 2),
        (2, 3, 9, 9, 3, 3, 0),
    ] {
        let x = randn(&mut rng, &[2, cin, h, w], 1.0);
        let wt = randn(&mut rng, &[cout, cin, kh, kh], 0.5);
        let b = randn(&mut rng, &[cout], 0.5);
        let expect = conv2d_naive(&x, &wt, Some(&b), stride, padding);
        let g = Graph::<f64>::no_grad();
        let (xv, wv, bv) = (g.input(x), g.input(wt), g.input(b));
        let got = g.value(g.conv2d(xv, wv, Some(bv), stride, padding));
        let diff = (&got.to_owned() - &expect).mapv(f64::abs);
        let max = diff.iter().cloned().fold(0.0, f64::max);
        assert!(max < 1e-10, "conv mismatch (k={kh} s={stride} p={padding}): {max}");
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[5, 9], 3.0);
    let g = Graph::<f64>::no_grad();
    let y = g.value(g.softmax_last(g.input(x.clone())));
    for r in 0..5 {
        let row: Vec<f64> = (0..9).map(|j| y[[r, j]]).collect();
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // Against a direct evaluation.
        let m = x
            .index_axis(ndarray::Axis(0), r)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..9).map(|j| (x[[r, j]] - m).exp()).sum();
        for (j, &val) in row.iter().enumerate() {
            assert!((val - (x[[r, j]] - m).exp() / denom).abs() < 1e-12);
        }
    }
}

#[test]
fn group_norm_whitens_each_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[2, 6, 4, 4], 2.5);
    let g = Graph::<f64>::no_grad();
    let y = g.value(g.group_norm(g.input(x), 3, 1e-8));
    let y = y.into_dimensionality::<ndarray::Ix4>().unwrap();
    for b in 0..2 {
        for grp in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|c| {
                    let ch = grp * 2 + c;
                    (0..4).flat_map(move |i| (0..4).map(move |j| (ch, i, j)))
                })
                .map(|(c, i, j)| y[[b, c, i, j]])
                .collect();
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10, "group mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "group var {var}");
        }
    }
}

#[test]
fn bmm_matches_per_item_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = randn(&mut rng, &[3, 4, 5], 1.0);
    let b = randn(&mut rng, &[3, 5, 6], 1.0);
    let g = Graph::<f64>::no_grad();
    let y = g.value(g.bmm(g.input(a.clone()), g.input(b.clone()), false));
    for i in 0..3 {
        let ai = a
            .index_axis(ndarray::Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let bi = b
            .index_axis(ndarray::Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let yi = ai.dot(&bi);
        for r in 0..4 {
            for c in 0..6 {
                assert!((y[[i, r, c]] - yi[[r, c]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn upsample_replicates_2x2_blocks() {
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let g = Graph::<f64>::no_grad();
    let y = g.value(g.upsample_nearest_2x(g.input(x)));
    let expect = [
        [1.0, 1.0, 2.0, 2.0],
        [1.0, 1.0, 2.0, 2.0],
        [3.0, 3.0, 4.0, 4.0],
        [3.0, 3.0, 4.0, 4.0],
    ];
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(y[[0, 0, i, j]], expect[i][j]);
        }
    }
}

#[test]
fn weighted_l1_matches_manual_computation() {
    let pred = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 5.0]).unwrap();
    let target = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.0, 4.0, 3.0, 1.0]).unwrap();
    let weights = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 3.0, 0.5, 0.5]).unwrap();
    // item 0: (1*1 + 3*2) / 4 = 1.75; item 1: (0.5*0 + 0.5*4) / 1 = 2.0
    let g = Graph::<f64>::no_grad();
    let loss = g.scalar_value(g.weighted_l1_to_const(g.input(pred), &target, &weights));
    assert!((loss - (1.75 + 2.0) / 2.0).abs() < 1e-12);
}

#[test]
fn backward_accumulates_when_param_reused() {
    // loss = w·w (elementwise square summed): grad = 2w.
    let mut ps: ParamSet<f64> = ParamSet::new();
    let id = ps.add("w", ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap());
    let g = Graph::<f64>::new();
    let a = g.param(&ps, id);
    let b = g.param(&ps, id); // second leaf bound to the same parameter
    let prod = g.mul(a, b);
    let loss = g.mean_all(prod);
    let grads = g.backward(loss);
    let gw = grads.get(id).unwrap();
    for (i, &w) in [1.0, -2.0, 0.5].iter().enumerate() {
        assert!((gw[[i]] - 2.0 * w / 3.0).abs() < 1e-12);
    }
}

#[test]
fn no_grad_graph_yields_no_gradients() {
    let mut ps: ParamSet<f64> = ParamSet::new();
    let id = ps.add("w", ArrayD::from_elem(IxDyn(&[2]), 1.5));
    let g = Graph::<f64>::no_grad();
    let a = g.param(&ps, id);
    let loss = g.mean_all(a);
    let grads = g.backward(loss);
    assert!(grads.get(id).is_none());
    let _ = &mut ps;
}

#[test]
#[should_panic(expected = "backward already run")]
fn double_backward_panics() {
    let g = Graph::<f64>::new();
    let x = g.input(ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let y = g.scale(x, 2.0);
    let _ = g.backward(y);
    let _ = g.backward(y);
}
