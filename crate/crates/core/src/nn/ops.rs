//! Neural-network operators: linear/matmul, attention primitives, norms,
//! convolution (im2col + GEMM), resampling, FiLM, and loss heads.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn, Zip};

use super::graph::{Graph, Var};
use super::Scalar;

/// Output spatial size of a 2-D convolution (floor semantics).
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

impl<S: Scalar> Graph<S> {
    // ---- dense algebra -------------------------------------------------

    /// Matrix product of `a: (N, K)` and `b: (K, M)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = {
            let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
            a2.dot(&b2).into_dyn()
        };
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(a, g2.dot(&b2.t()).into_dyn());
                sink.add(b, a2.t().dot(&g2).into_dyn());
            })),
            None,
        )
    }

    /// Affine map `x (N, Fin) · w (Fin, Fout) + b (Fout)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias_rows(y, b),
            None => y,
        }
    }

    /// Adds a `(F)` bias to every row of `x (N, F)`.
    pub fn add_bias_rows(&self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let f = bv.len();
        assert_eq!(xv.shape()[xv.ndim() - 1], f, "bias length mismatch");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            Zip::from(&mut row).and(&b1).for_each(|o, &bb| *o = *o + bb);
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(x, g.clone());
                let mut db = Array1::<S>::zeros(f);
                for row in g.rows() {
                    Zip::from(&mut db).and(&row).for_each(|d, &gg| *d = *d + gg);
                }
                sink.add(b, db.into_dyn());
            })),
            None,
        )
    }

    /// Batched matrix product over the leading axis.
    ///
    /// `a: (B, T, K)`; `b: (B, K, M)` or, with `transpose_b`, `(B, M, K)`.
    pub fn bmm(&self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (bsz, t, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let m = if transpose_b {
            assert_eq!(bv.shape()[2], k, "bmm inner dim");
            bv.shape()[1]
        } else {
            assert_eq!(bv.shape()[1], k, "bmm inner dim");
            bv.shape()[2]
        };
        assert_eq!(bv.shape()[0], bsz, "bmm batch dim");
        let mut out = ArrayD::<S>::zeros(IxDyn(&[bsz, t, m]));
        for i in 0..bsz {
            let ai = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let bi = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let mut oi = out
                .index_axis_mut(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            if transpose_b {
                general_mat_mul(S::one(), &ai, &bi.t(), S::zero(), &mut oi);
            } else {
                general_mat_mul(S::one(), &ai, &bi, S::zero(), &mut oi);
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = ArrayD::<S>::zeros(av.raw_dim());
                let mut db = ArrayD::<S>::zeros(bv.raw_dim());
                for i in 0..bsz {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let ai = av
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let bi = bv
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let mut dai = da
                        .index_axis_mut(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let mut dbi = db
                        .index_axis_mut(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    if transpose_b {
                        // y = a·bᵀ: da = g·b, db = gᵀ·a
                        general_mat_mul(S::one(), &gi, &bi, S::zero(), &mut dai);
                        general_mat_mul(S::one(), &gi.t(), &ai, S::zero(), &mut dbi);
                    } else {
                        // y = a·b: da = g·bᵀ, db = aᵀ·g
                        general_mat_mul(S::one(), &gi, &bi.t(), S::zero(), &mut dai);
                        general_mat_mul(S::one(), &ai.t(), &gi, S::zero(), &mut dbi);
                    }
                }
                sink.add(a, da);
                sink.add(b, db);
            })),
            None,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("softmax needs rank >= 1");
        let rows = xv.len() / d;
        let xs = xv.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(xv.raw_dim());
        {
            let os = out.as_slice_mut().unwrap();
            for r in 0..rows {
                softmax_row(&xs[r * d..(r + 1) * d], &mut os[r * d..(r + 1) * d]);
            }
        }
        let y = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(y.raw_dim());
                let ds = dx.as_slice_mut().unwrap();
                for r in 0..rows {
                    let (gr, yr) = (&gs[r * d..(r + 1) * d], &ys[r * d..(r + 1) * d]);
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot = dot + gr[j] * yr[j];
                    }
                    let dr = &mut ds[r * d..(r + 1) * d];
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                sink.add(x, dx);
            })),
            None,
        )
    }

    // ---- normalization ---------------------------------------------------

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, x: Var, w: Var, b: Var, eps: f64) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let d = *xv.shape().last().unwrap();
        assert_eq!(wv.len(), d, "layer_norm weight length");
        assert_eq!(bv.len(), d, "layer_norm bias length");
        let rows = xv.len() / d;
        let eps = S::from_f64(eps);
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();

        let mut norm = ArrayD::<S>::zeros(xv.raw_dim());
        let mut out = ArrayD::<S>::zeros(xv.raw_dim());
        let mut inv_std = vec![S::zero(); rows];
        {
            let ns = norm.as_slice_mut().unwrap();
            let os = out.as_slice_mut().unwrap();
            let inv_d = S::from_f64(1.0 / d as f64);
            for r in 0..rows {
                let xr = &xs[r * d..(r + 1) * d];
                let mut mean = S::zero();
                for &v in xr {
                    mean = mean + v;
                }
                mean = mean * inv_d;
                let mut var = S::zero();
                for &v in xr {
                    let c = v - mean;
                    var = var + c * c;
                }
                var = var * inv_d;
                let inv = S::one() / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let nj = (xr[j] - mean) * inv;
                    ns[r * d + j] = nj;
                    os[r * d + j] = nj * ws[j] + bs[j];
                }
            }
        }
        let norm = norm.into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let ns = norm.as_slice().unwrap();
                let ws = wv.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(norm.raw_dim());
                let mut dw = vec![S::zero(); d];
                let mut db = vec![S::zero(); d];
                let inv_d = S::from_f64(1.0 / d as f64);
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    for r in 0..rows {
                        let gr = &gs[r * d..(r + 1) * d];
                        let nr = &ns[r * d..(r + 1) * d];
                        let mut mean_dn = S::zero();
                        let mut mean_dnn = S::zero();
                        for j in 0..d {
                            let dn = gr[j] * ws[j];
                            mean_dn = mean_dn + dn;
                            mean_dnn = mean_dnn + dn * nr[j];
                            dw[j] = dw[j] + gr[j] * nr[j];
                            db[j] = db[j] + gr[j];
                        }
                        mean_dn = mean_dn * inv_d;
                        mean_dnn = mean_dnn * inv_d;
                        let inv = inv_std[r];
                        let dxr = &mut dxs[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dn = gr[j] * ws[j];
                            dxr[j] = inv * (dn - mean_dn - nr[j] * mean_dnn);
                        }
                    }
                }
                sink.add(x, dx);
                sink.add(w, Array1::from_vec(dw).into_dyn());
                sink.add(b, Array1::from_vec(db).into_dyn());
            })),
            None,
        )
    }

    /// Affine-free group normalization of `x (B, C, H, W)`.
    ///
    /// The scale/shift live in downstream FiLM conditioning, so this op only
    /// whitens each group.
    pub fn group_norm(&self, x: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 4, "group_norm expects (B, C, H, W)");
        let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        let group_len = (c / groups) * h * w;
        let n_groups = bsz * groups;
        let eps = S::from_f64(eps);
        let xs = xv.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(xv.raw_dim());
        let mut inv_std = vec![S::zero(); n_groups];
        {
            let os = out.as_slice_mut().unwrap();
            let inv_n = S::from_f64(1.0 / group_len as f64);
            for gi in 0..n_groups {
                let xr = &xs[gi * group_len..(gi + 1) * group_len];
                let mut mean = S::zero();
                for &v in xr {
                    mean = mean + v;
                }
                mean = mean * inv_n;
                let mut var = S::zero();
                for &v in xr {
                    let cdev = v - mean;
                    var = var + cdev * cdev;
                }
                var = var * inv_n;
                let inv = S::one() / (var + eps).sqrt();
                inv_std[gi] = inv;
                let or = &mut os[gi * group_len..(gi + 1) * group_len];
                for j in 0..group_len {
                    or[j] = (xr[j] - mean) * inv;
                }
            }
        }
        let y = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(y.raw_dim());
                let inv_n = S::from_f64(1.0 / group_len as f64);
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    for gi in 0..n_groups {
                        let gr = &gs[gi * group_len..(gi + 1) * group_len];
                        let yr = &ys[gi * group_len..(gi + 1) * group_len];
                        let mut mean_g = S::zero();
                        let mut mean_gy = S::zero();
                        for j in 0..group_len {
                            mean_g = mean_g + gr[j];
                            mean_gy = mean_gy + gr[j] * yr[j];
                        }
                        mean_g = mean_g * inv_n;
                        mean_gy = mean_gy * inv_n;
                        let inv = inv_std[gi];
                        let dxr = &mut dxs[gi * group_len..(gi + 1) * group_len];
                        for j in 0..group_len {
                            dxr[j] = inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
                sink.add(x, dx);
            })),
            None,
        )
    }

    // ---- convolution -----------------------------------------------------

    /// 2-D convolution of `x (B, Cin, H, W)` with `w (Cout, Cin, kh, kw)`.
    ///
    /// Floor semantics for the output size; lowers to im2col + GEMM with the
    /// column buffer recomputed in backward. `1x1`/stride-1/no-pad kernels
    /// skip im2col entirely.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let xshape = xv.shape().to_vec();
        let wshape = wv.shape().to_vec();
        assert_eq!(xshape.len(), 4, "conv2d input must be (B, Cin, H, W)");
        assert_eq!(wshape.len(), 4, "conv2d weight must be (Cout, Cin, kh, kw)");
        assert_eq!(xshape[1], wshape[1], "conv2d channel mismatch");
        let (bsz, cin, h, wdt) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        let ho = conv2d_output_size(h, kh, stride, padding);
        let wo = conv2d_output_size(wdt, kw, stride, padding);
        let k = cin * kh * kw;
        let howo = ho * wo;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

        let bias = b.map(|bv| (bv, self.value(bv)));
        let mut out = ArrayD::<S>::zeros(IxDyn(&[bsz, cout, ho, wo]));
        {
            let xs = xv.as_slice().unwrap();
            let ws2 = ArrayView2::from_shape((cout, k), wv.as_slice().unwrap()).unwrap();
            let os = out.as_slice_mut().unwrap();
            let mut cols = if pointwise {
                Vec::new()
            } else {
                vec![S::zero(); k * howo]
            };
            for bi in 0..bsz {
                let x_item = &xs[bi * cin * h * wdt..(bi + 1) * cin * h * wdt];
                let mut o_item = ArrayViewMut2::from_shape(
                    (cout, howo),
                    &mut os[bi * cout * howo..(bi + 1) * cout * howo],
                )
                .unwrap();
                if pointwise {
                    let xi = ArrayView2::from_shape((cin, howo), x_item).unwrap();
                    general_mat_mul(S::one(), &ws2, &xi, S::zero(), &mut o_item);
                } else {
                    im2col(
                        x_item, &mut cols, cin, h, wdt, kh, kw, stride, padding, ho, wo,
                    );
                    let ci = ArrayView2::from_shape((k, howo), &cols[..]).unwrap();
                    general_mat_mul(S::one(), &ws2, &ci, S::zero(), &mut o_item);
                }
            }
            if let Some((_, ref bval)) = bias {
                let bs = bval.as_slice().unwrap();
                for bi in 0..bsz {
                    for co in 0..cout {
                        let seg = &mut os[(bi * cout + co) * howo..(bi * cout + co + 1) * howo];
                        let bb = bs[co];
                        for v in seg {
                            *v = *v + bb;
                        }
                    }
                }
            }
        }

        let bias_var = bias.as_ref().map(|(v, _)| *v);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let xs = xv.as_slice().unwrap();
                let ws2 = ArrayView2::from_shape((cout, k), wv.as_slice().unwrap()).unwrap();
                let mut dx = ArrayD::<S>::zeros(xv.raw_dim());
                let mut dw = Array2::<S>::zeros((cout, k));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let mut cols = if pointwise {
                        Vec::new()
                    } else {
                        vec![S::zero(); k * howo]
                    };
                    let mut dcols = if pointwise {
                        Array2::<S>::zeros((0, 0))
                    } else {
                        Array2::<S>::zeros((k, howo))
                    };
                    for bi in 0..bsz {
                        let x_item = &xs[bi * cin * h * wdt..(bi + 1) * cin * h * wdt];
                        let g_item = ArrayView2::from_shape(
                            (cout, howo),
                            &gs[bi * cout * howo..(bi + 1) * cout * howo],
                        )
                        .unwrap();
                        let dx_item = &mut dxs[bi * cin * h * wdt..(bi + 1) * cin * h * wdt];
                        if pointwise {
                            let xi = ArrayView2::from_shape((cin, howo), x_item).unwrap();
                            general_mat_mul(S::one(), &g_item, &xi.t(), S::one(), &mut dw);
                            let mut dxi =
                                ArrayViewMut2::from_shape((cin, howo), dx_item).unwrap();
                            general_mat_mul(S::one(), &ws2.t(), &g_item, S::zero(), &mut dxi);
                        } else {
                            im2col(
                                x_item, &mut cols, cin, h, wdt, kh, kw, stride, padding, ho, wo,
                            );
                            let ci = ArrayView2::from_shape((k, howo), &cols[..]).unwrap();
                            general_mat_mul(S::one(), &g_item, &ci.t(), S::one(), &mut dw);
                            general_mat_mul(S::one(), &ws2.t(), &g_item, S::zero(), &mut dcols);
                            col2im(
                                dcols.as_slice().unwrap(),
                                dx_item,
                                cin,
                                h,
                                wdt,
                                kh,
                                kw,
                                stride,
                                padding,
                                ho,
                                wo,
                            );
                        }
                    }
                }
                sink.add(x, dx);
                sink.add(
                    w,
                    dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                        .unwrap(),
                );
                if let Some(bvar) = bias_var {
                    let mut db = vec![S::zero(); cout];
                    for bi in 0..bsz {
                        for co in 0..cout {
                            let seg = &gs[(bi * cout + co) * howo..(bi * cout + co + 1) * howo];
                            let mut acc = S::zero();
                            for &v in seg {
                                acc = acc + v;
                            }
                            db[co] = db[co] + acc;
                        }
                    }
                    sink.add(bvar, Array1::from_vec(db).into_dyn());
                }
            })),
            None,
        )
    }

    // ---- spatial ----------------------------------------------------------

    /// Nearest-neighbor 2x upsampling of `x (B, C, H, W)`.
    pub fn upsample_nearest_2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample expects (B, C, H, W)");
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = ArrayD::<S>::zeros(IxDyn(&[s[0], s[1], 2 * h, 2 * w]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for p in 0..bc {
                for i in 0..h {
                    let src = &xs[(p * h + i) * w..(p * h + i + 1) * w];
                    let base = (p * 2 * h + 2 * i) * 2 * w;
                    for j in 0..w {
                        let v = src[j];
                        os[base + 2 * j] = v;
                        os[base + 2 * j + 1] = v;
                    }
                    let (lo, hi) = os.split_at_mut(base + 2 * w);
                    hi[..2 * w].copy_from_slice(&lo[base..base + 2 * w]);
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(IxDyn(&s));
                let dxs = dx.as_slice_mut().unwrap();
                for p in 0..bc {
                    for i in 0..h {
                        let dst = &mut dxs[(p * h + i) * w..(p * h + i + 1) * w];
                        for (di, row) in [2 * i, 2 * i + 1].into_iter().enumerate() {
                            let _ = di;
                            let src = &gs[(p * 2 * h + row) * 2 * w..(p * 2 * h + row + 1) * 2 * w];
                            for j in 0..w {
                                dst[j] = dst[j] + src[2 * j] + src[2 * j + 1];
                            }
                        }
                    }
                }
                sink.add(x, dx);
            })),
            None,
        )
    }

    /// FiLM-style conditioning: `y = x * (1 + scale) + shift`.
    ///
    /// `x: (B, C, H, W)`; `scale`, `shift`: `(B, C)` broadcast over space.
    pub fn film(&self, x: Var, scale: Var, shift: Var) -> Var {
        let (xv, sv, tv) = (self.value(x), self.value(scale), self.value(shift));
        let sh = xv.shape().to_vec();
        assert_eq!(sh.len(), 4, "film expects (B, C, H, W)");
        let (bsz, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        assert_eq!(sv.shape(), &[bsz, c], "film scale shape");
        assert_eq!(tv.shape(), &[bsz, c], "film shift shape");
        let mut out = ArrayD::<S>::zeros(xv.raw_dim());
        {
            let xs = xv.as_slice().unwrap();
            let ss = sv.as_slice().unwrap();
            let ts = tv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for p in 0..bsz * c {
                let (sc, sf) = (S::one() + ss[p], ts[p]);
                let xr = &xs[p * hw..(p + 1) * hw];
                let or = &mut os[p * hw..(p + 1) * hw];
                for j in 0..hw {
                    or[j] = xr[j] * sc + sf;
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let xs = xv.as_slice().unwrap();
                let ss = sv.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(xv.raw_dim());
                let mut dscale = ArrayD::<S>::zeros(sv.raw_dim());
                let mut dshift = ArrayD::<S>::zeros(sv.raw_dim());
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dss = dscale.as_slice_mut().unwrap();
                    let dts = dshift.as_slice_mut().unwrap();
                    for p in 0..bsz * c {
                        let sc = S::one() + ss[p];
                        let gr = &gs[p * hw..(p + 1) * hw];
                        let xr = &xs[p * hw..(p + 1) * hw];
                        let dxr = &mut dxs[p * hw..(p + 1) * hw];
                        let mut acc_s = S::zero();
                        let mut acc_t = S::zero();
                        for j in 0..hw {
                            dxr[j] = gr[j] * sc;
                            acc_s = acc_s + gr[j] * xr[j];
                            acc_t = acc_t + gr[j];
                        }
                        dss[p] = acc_s;
                        dts[p] = acc_t;
                    }
                }
                sink.add(x, dx);
                sink.add(scale, dscale);
                sink.add(shift, dshift);
            })),
            None,
        )
    }

    // ---- reductions & row geometry -----------------------------------------

    /// Mean over axis 1 of `x (B, T, D)`, producing `(B, D)`.
    pub fn mean_axis1(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 3, "mean_axis1 expects (B, T, D)");
        let inv_t = S::from_f64(1.0 / s[1] as f64);
        let out = xv.sum_axis(Axis(1)).mapv(|v| v * inv_t);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&s));
                for mut t_slice in dx.axis_iter_mut(Axis(1)) {
                    Zip::from(&mut t_slice)
                        .and(g)
                        .for_each(|d, &gg| *d = gg * inv_t);
                }
                sink.add(x, dx);
            })),
            None,
        )
    }

    /// Adds `p (T, D)` to every batch row of `x (B, T, D)`.
    pub fn add_broadcast_rows(&self, x: Var, p: Var) -> Var {
        let (xv, pv) = (self.value(x), self.value(p));
        let s = xv.shape().to_vec();
        assert_eq!(&s[1..], pv.shape(), "broadcast shape mismatch");
        let mut out = xv.to_owned();
        for mut item in out.axis_iter_mut(Axis(0)) {
            Zip::from(&mut item).and(&pv).for_each(|o, &pp| *o = *o + pp);
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(x, g.clone());
                sink.add(p, g.sum_axis(Axis(0)));
            })),
            None,
        )
    }

    /// L2-normalizes each row of `x (N, D)`: `y_i = x_i / sqrt(|x_i|^2 + eps)`.
    pub fn l2_normalize_rows(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 2, "l2_normalize_rows expects (N, D)");
        let (n, d) = (s[0], s[1]);
        let eps = S::from_f64(eps);
        let xs = xv.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(xv.raw_dim());
        let mut inv_norm = vec![S::zero(); n];
        {
            let os = out.as_slice_mut().unwrap();
            for r in 0..n {
                let xr = &xs[r * d..(r + 1) * d];
                let mut sq = S::zero();
                for &v in xr {
                    sq = sq + v * v;
                }
                let inv = S::one() / (sq + eps).sqrt();
                inv_norm[r] = inv;
                for j in 0..d {
                    os[r * d + j] = xr[j] * inv;
                }
            }
        }
        let y = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(y.raw_dim());
                let dxs = dx.as_slice_mut().unwrap();
                for r in 0..n {
                    let gr = &gs[r * d..(r + 1) * d];
                    let yr = &ys[r * d..(r + 1) * d];
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot = dot + gr[j] * yr[j];
                    }
                    let inv = inv_norm[r];
                    let dxr = &mut dxs[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxr[j] = (gr[j] - yr[j] * dot) * inv;
                    }
                }
                sink.add(x, dx);
            })),
            None,
        )
    }

    // ---- loss heads --------------------------------------------------------

    /// Mean squared error against a constant target; returns a `[1]` node.
    pub fn mse_to_const(&self, x: Var, target: &ArrayD<S>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse target shape");
        let n = xv.len();
        let inv_n = S::from_f64(1.0 / n as f64);
        let diff = Zip::from(&xv).and(target).map_collect(|&a, &t| a - t);
        let sse = diff.iter().fold(S::zero(), |acc, &v| acc + v * v);
        let out = ArrayD::from_elem(IxDyn(&[1]), sse * inv_n);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g0 = g[[0]];
                let two = S::from_f64(2.0);
                sink.add(x, diff.mapv(|v| two * v * g0 * inv_n));
            })),
            None,
        )
    }

    /// ROI-weighted mean absolute error against a constant target.
    ///
    /// `pred`, `target`, `weights` all share shape `(B, ...)`. Each batch
    /// item's weighted L1 is normalized by that item's weight mass, then the
    /// batch is averaged. Returns a `[1]` node.
    pub fn weighted_l1_to_const(
        &self,
        pred: Var,
        target: &ArrayD<S>,
        weights: &ArrayD<S>,
    ) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "weighted_l1 target shape");
        assert_eq!(pv.shape(), weights.shape(), "weighted_l1 weight shape");
        let bsz = pv.shape()[0];
        let item = pv.len() / bsz;
        let ps = pv.as_slice().unwrap();
        let ts = target.as_standard_layout();
        let ts = ts.as_slice().unwrap();
        let wsl = weights.as_standard_layout();
        let wsl = wsl.as_slice().unwrap();
        let mut inv_mass = vec![S::zero(); bsz];
        let mut total = S::zero();
        for bi in 0..bsz {
            let mut mass = S::zero();
            let mut acc = S::zero();
            for j in bi * item..(bi + 1) * item {
                mass = mass + wsl[j];
                acc = acc + wsl[j] * (ps[j] - ts[j]).abs();
            }
            assert!(mass > S::zero(), "weight mask sums to zero");
            inv_mass[bi] = S::one() / mass;
            total = total + acc * inv_mass[bi];
        }
        let inv_b = S::from_f64(1.0 / bsz as f64);
        let out = ArrayD::from_elem(IxDyn(&[1]), total * inv_b);
        let (pv2, tgt, wts) = (pv.clone(), target.clone(), weights.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g0 = g[[0]];
                let ps = pv2.as_slice().unwrap();
                let ts = tgt.as_standard_layout();
                let ts = ts.as_slice().unwrap();
                let ws = wts.as_standard_layout();
                let ws = ws.as_slice().unwrap();
                let mut dx = ArrayD::<S>::zeros(pv2.raw_dim());
                let dxs = dx.as_slice_mut().unwrap();
                for bi in 0..bsz {
                    let coef = g0 * inv_b * inv_mass[bi];
                    for j in bi * item..(bi + 1) * item {
                        let d = ps[j] - ts[j];
                        let sign = if d > S::zero() {
                            S::one()
                        } else if d < S::zero() {
                            S::zero() - S::one()
                        } else {
                            S::zero()
                        };
                        dxs[j] = coef * ws[j] * sign;
                    }
                }
                sink.add(pred, dx);
            })),
            None,
        )
    }

    /// Symmetric InfoNCE (NT-Xent) over two aligned batches of embeddings.
    ///
    /// `z1`, `z2`: `(B, D)` with `z1[i]`/`z2[i]` a positive pair; similarity
    /// is the dot product scaled by `1/temperature` (callers normalize rows
    /// first to make it cosine). Averages the loss over all `2B` anchors and
    /// returns a `[1]` node. With `B = 1` there are no negatives and the loss
    /// is identically zero.
    pub fn info_nce(&self, z1: Var, z2: Var, temperature: f64) -> Var {
        let (av, bv) = (self.value(z1), self.value(z2));
        assert_eq!(av.shape(), bv.shape(), "info_nce batch shapes differ");
        let (bsz, d) = (av.shape()[0], av.shape()[1]);
        let n = 2 * bsz;
        let inv_tau = S::from_f64(1.0 / temperature);

        // Z = [z1; z2], logits = Z·Zᵀ/τ with the diagonal masked out.
        let mut z = Array2::<S>::zeros((n, d));
        z.slice_mut(ndarray::s![..bsz, ..])
            .assign(&av.view().into_dimensionality::<Ix2>().unwrap());
        z.slice_mut(ndarray::s![bsz.., ..])
            .assign(&bv.view().into_dimensionality::<Ix2>().unwrap());
        let mut logits = Array2::<S>::zeros((n, n));
        general_mat_mul(inv_tau, &z.view(), &z.t(), S::zero(), &mut logits);

        // Row-wise softmax over j != i, tracking the positive's probability.
        let mut probs = Array2::<S>::zeros((n, n));
        let mut loss = 0.0f64;
        for i in 0..n {
            let pos = (i + bsz) % n;
            let row = logits.row(i);
            let mut maxv = S::from_f64(f64::NEG_INFINITY);
            for j in 0..n {
                if j != i && row[j] > maxv {
                    maxv = row[j];
                }
            }
            let mut denom = S::zero();
            for j in 0..n {
                if j != i {
                    denom = denom + (row[j] - maxv).exp();
                }
            }
            let log_denom = maxv.to_f64() + denom.to_f64().ln();
            loss += log_denom - row[pos].to_f64();
            let mut prow = probs.row_mut(i);
            for j in 0..n {
                if j != i {
                    prow[j] = (row[j] - maxv).exp() / denom;
                }
            }
        }
        loss /= n as f64;
        let out = ArrayD::from_elem(IxDyn(&[1]), S::from_f64(loss));

        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g0 = g[[0]];
                // dL/dlogits = (probs - onehot(pos)) / n; dL/dZ = (A + Aᵀ)·Z/τ.
                let inv_n = S::from_f64(1.0 / n as f64);
                let mut a = probs;
                for i in 0..n {
                    let pos = (i + bsz) % n;
                    a[(i, pos)] = a[(i, pos)] - S::one();
                }
                a.mapv_inplace(|v| v * inv_n);
                let sym = &a + &a.t();
                let mut dz = Array2::<S>::zeros((n, d));
                general_mat_mul(inv_tau, &sym.view(), &z.view(), S::zero(), &mut dz);
                dz.mapv_inplace(|v| v * g0);
                sink.add(z1, dz.slice(ndarray::s![..bsz, ..]).to_owned().into_dyn());
                sink.add(z2, dz.slice(ndarray::s![bsz.., ..]).to_owned().into_dyn());
            })),
            None,
        )
    }
}

fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let mut maxv = x[0];
    for &v in x {
        if v > maxv {
            maxv = v;
        }
    }
    let mut denom = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - maxv).exp();
        *o = e;
        denom = denom + e;
    }
    let inv = S::one() / denom;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Unfolds padded patches of one image into a `(Cin*kh*kw, Ho*Wo)` buffer.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cols: &mut [S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let howo = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * howo;
                // Valid output columns: 0 <= ox*stride + kx - padding < w.
                let ox_lo = padding.saturating_sub(kx).div_ceil(stride).min(wo);
                let ox_hi = if w + padding > kx {
                    ((w + padding - kx - 1) / stride + 1).min(wo)
                } else {
                    0
                };
                for oy in 0..ho {
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    dst[..ox_lo].fill(S::zero());
                    dst[ox_hi.max(ox_lo)..].fill(S::zero());
                    if stride == 1 {
                        // ix = ox + kx - padding is contiguous in ox.
                        let ix0 = ox_lo + kx - padding;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `(Cin*kh*kw, Ho*Wo)` gradient buffer back into image layout.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    dx: &mut [S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let howo = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * howo;
                let ox_lo = padding.saturating_sub(kx).div_ceil(stride).min(wo);
                let ox_hi = if w + padding > kx {
                    ((w + padding - kx - 1) / stride + 1).min(wo)
                } else {
                    0
                };
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst =
                        &mut dx[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    if stride == 1 {
                        let ix0 = ox_lo + kx - padding;
                        for (i, ox) in (ox_lo..ox_hi.max(ox_lo)).enumerate() {
                            dst[ix0 + i] = dst[ix0 + i] + src[ox];
                        }
                    } else {
                        for ox in ox_lo..ox_hi.max(ox_lo) {
                            let ix = ox * stride + kx - padding;
                            dst[ix] = dst[ix] + src[ox];
                        }
                    }
                }
            }
        }
    }
}
