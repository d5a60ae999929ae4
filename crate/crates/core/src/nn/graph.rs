//! The autodiff tape: node storage, elementwise/view ops, and backward.

use ndarray::{ArcArray, ArrayD, Axis, IxDyn, Slice, Zip};
use std::cell::{Cell, RefCell};

use super::{ParamId, ParamSet, Scalar};

/// Reference-counted dynamic-dimensional tensor.
///
/// Cloning a `Tensor` bumps a refcount, so backward closures can capture the
/// inputs they need without copying data.
pub type Tensor<S> = ArcArray<S, IxDyn>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(super) usize);

type BackFn<S> = Box<dyn FnOnce(&ArrayD<S>, &mut Sink<S>)>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    back: Option<BackFn<S>>,
    param: Option<ParamId>,
}

/// Accumulates gradients flowing into tape nodes during backward.
pub(super) struct Sink<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Sink<S> {
    /// Adds `g` into the gradient slot of `v` (sum if already present).
    pub(super) fn add(&mut self, v: Var, g: ArrayD<S>) {
        match &mut self.grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                Zip::from(acc).and(&g).for_each(|a, &b| *a = *a + b);
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    // Sorted by ParamId, one entry per parameter that received gradient.
    list: Vec<(ParamId, ArrayD<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<S>> {
        self.list
            .binary_search_by_key(&id, |(p, _)| *p)
            .ok()
            .map(|i| &self.list[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<S>)> {
        self.list.iter().map(|(p, g)| (*p, g))
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.list
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&x| x.to_f64() * x.to_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// A single-use forward tape.
///
/// Build one graph per optimization step (or per inference invocation), run
/// ops through it, call [`Graph::backward`] at most once, then drop it.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    grad: bool,
    consumed: Cell<bool>,
}

impl<S: Scalar> Graph<S> {
    /// A graph that records backward closures (training mode).
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad: true,
            consumed: Cell::new(false),
        }
    }

    /// A graph that skips backward bookkeeping (inference mode).
    pub fn no_grad() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad: false,
            consumed: Cell::new(false),
        }
    }

    pub(super) fn push(
        &self,
        value: ArrayD<S>,
        back: Option<BackFn<S>>,
        param: Option<ParamId>,
    ) -> Var {
        // Normalizing to standard layout lets every op read raw slices.
        let value = if value.is_standard_layout() {
            value
        } else {
            let std = value.as_standard_layout().into_owned();
            std
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: value.into_shared(),
            back: if self.grad { back } else { None },
            param,
        });
        Var(id)
    }

    /// Current value of a node (cheap: refcount bump).
    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Extracts the single element of a scalar-shaped node.
    pub fn scalar_value(&self, v: Var) -> S {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected scalar node");
        *t.iter().next().unwrap()
    }

    // ---- leaves ------------------------------------------------------

    /// A constant leaf (no gradient ever flows out of it).
    pub fn input(&self, value: ArrayD<S>) -> Var {
        self.push(value, None, None)
    }

    /// A parameter leaf bound to `id`; gradients accumulate per parameter.
    pub fn param(&self, params: &ParamSet<S>, id: ParamId) -> Var {
        self.push(params.get(id).clone(), None, Some(id))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from `loss` (scalar-shaped) back to all parameters.
    ///
    /// Consumes the tape's backward closures; calling it twice panics.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert!(!self.consumed.replace(true), "graph backward already run");
        let mut nodes = self.nodes.borrow_mut();
        let mut sink = Sink {
            grads: vec![None; nodes.len()],
        };
        sink.grads[loss.0] = Some(ArrayD::ones(nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            if let Some(f) = nodes[i].back.take() {
                if let Some(g) = sink.grads[i].take() {
                    f(&g, &mut sink);
                }
            }
        }
        let mut list: Vec<(ParamId, ArrayD<S>)> = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = sink.grads[i].take() {
                    list.push((pid, g));
                }
            }
        }
        // The same parameter may appear as several leaves; merge their grads.
        list.sort_by_key(|(p, _)| *p);
        let mut merged: Vec<(ParamId, ArrayD<S>)> = Vec::with_capacity(list.len());
        for (p, g) in list {
            match merged.last_mut() {
                Some((lp, lg)) if *lp == p => {
                    Zip::from(lg).and(&g).for_each(|a, &b| *a = *a + b);
                }
                _ => merged.push((p, g)),
            }
        }
        Gradients { list: merged }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = Zip::from(&av).and(&bv).map_collect(|&x, &y| x + y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
            None,
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let out = Zip::from(&av).and(&bv).map_collect(|&x, &y| x - y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.mapv(|x| S::zero() - x));
            })),
            None,
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = Zip::from(&av).and(&bv).map_collect(|&x, &y| x * y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, Zip::from(g).and(&bv).map_collect(|&gg, &y| gg * y));
                sink.add(b, Zip::from(g).and(&av).map_collect(|&gg, &x| gg * x));
            })),
            None,
        )
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x * c);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.mapv(|x| x * c));
            })),
            None,
        )
    }

    pub fn add_scalar(&self, a: Var, c: S) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x + c);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
            })),
            None,
        )
    }

    /// `ca * a + cb * b` for same-shaped tensors (used to combine losses).
    pub fn add_weighted(&self, a: Var, ca: S, b: Var, cb: S) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add_weighted shape mismatch");
        let out = Zip::from(&av)
            .and(&bv)
            .map_collect(|&x, &y| x * ca + y * cb);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.mapv(|x| x * ca));
                sink.add(b, g.mapv(|x| x * cb));
            })),
            None,
        )
    }

    /// Sigmoid-weighted linear unit: `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x * sigmoid(x));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let dx = Zip::from(g).and(&av).map_collect(|&gg, &x| {
                    let s = sigmoid(x);
                    gg * (s + x * s * (S::one() - s))
                });
                sink.add(a, dx);
            })),
            None,
        )
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&self, a: Var) -> Var {
        let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = S::from_f64(0.044_715);
        let half = S::from_f64(0.5);
        let av = self.value(a);
        let out = av.mapv(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (S::one() + u.tanh())
        });
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let dx = Zip::from(g).and(&av).map_collect(|&gg, &x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (S::one() + S::from_f64(3.0) * k * x * x);
                    gg * (half * (S::one() + t) + half * x * (S::one() - t * t) * du)
                });
                sink.add(a, dx);
            })),
            None,
        )
    }

    // ---- views & shape -----------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let in_shape: Vec<usize> = av.shape().to_vec();
        assert_eq!(
            av.len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        // Node values are standard layout, so this is a metadata-only change.
        let out = av
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("contiguous reshape");
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gs = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("contiguous reshape");
                sink.add(a, gs);
            })),
            None,
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(axes.len(), av.ndim(), "permute rank mismatch");
        let out = av.view().permuted_axes(axes.to_vec()).to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gi = g.view().permuted_axes(inverse.clone()).to_owned();
                sink.add(a, gi);
            })),
            None,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let in_shape: Vec<usize> = av.shape().to_vec();
        assert!(start + len <= in_shape[axis], "narrow out of bounds");
        let out = av
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                sink.add(a, dx);
            })),
            None,
        )
    }

    /// Concatenation of two tensors along `axis`.
    pub fn concat(&self, axis: usize, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let alen = av.shape()[axis];
        let blen = bv.shape()[axis];
        let out = ndarray::concatenate(Axis(axis), &[av.view(), bv.view()])
            .expect("concat shape mismatch");
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.slice_axis(Axis(axis), Slice::from(0..alen)).to_owned(),
                );
                sink.add(
                    b,
                    g.slice_axis(Axis(axis), Slice::from(alen..alen + blen))
                        .to_owned(),
                );
            })),
            None,
        )
    }

    /// Mean over all elements, producing a `[1]`-shaped node.
    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len();
        let inv = S::from_f64(1.0 / n as f64);
        let mean = av.iter().fold(S::zero(), |acc, &x| acc + x) * inv;
        let shape: Vec<usize> = av.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[1]), mean);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gv = g[[0]] * inv;
                sink.add(a, ArrayD::from_elem(IxDyn(&shape), gv));
            })),
            None,
        )
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub(super) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (S::zero() - x).exp())
}
