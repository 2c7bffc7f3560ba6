//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! The model is small enough that a plain Wengert list works well: every
//! forward op pushes a node holding its value and, per parent, a closure
//! computing the vector-Jacobian product. `backward` walks the list in
//! reverse and accumulates gradients. All ops are single-threaded and
//! evaluate in a fixed order, so a run is bit-reproducible given its inputs.

use std::cell::RefCell;
use std::fmt::{Debug, Display};

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, ScalarOperand};
use num_traits::Float;

/// Element type the whole stack is generic over. Training runs in `f32`;
/// gradient checks instantiate the same code with `f64`.
pub trait Scalar:
    Float + ScalarOperand + std::ops::AddAssign + Debug + Display + Send + Sync + 'static
{
    const DTYPE_NAME: &'static str;
    /// IEEE-754 width in bytes when serialized.
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Raw IEEE-754 bits, zero-extended to 64; the low `BYTE_WIDTH` bytes
    /// carry the value, so round trips preserve the exact bit pattern.
    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;
    /// Exact error function (used by the erf-based GELU).
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE_NAME: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    const DTYPE_NAME: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type Vjp<S> = Box<dyn Fn(&ArrayD<S>) -> ArrayD<S>>;

struct Node<S: Scalar> {
    value: ArrayD<S>,
    parents: Vec<(usize, Vjp<S>)>,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: ArrayD<S>, parents: Vec<(usize, Vjp<S>)>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents });
        Var(nodes.len() - 1)
    }

    /// Insert an input with no parents.
    pub fn leaf(&self, value: ArrayD<S>) -> Var {
        self.push(value, Vec::new())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn value(&self, v: Var) -> ArrayD<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> S {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() called on non-scalar node");
        *val.iter().next().unwrap()
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<S>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Reverse pass from a scalar root. Gradients accumulate across all
    /// paths, including repeated uses of the same node.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            for (parent, vjp) in &nodes[i].parents {
                let delta = vjp(&g);
                match &mut grads[*parent] {
                    Some(acc) => *acc = &*acc + &delta,
                    slot @ None => *slot = Some(delta),
                }
            }
            if i != root.0 && !nodes[i].parents.is_empty() {
                // interior grads are not read back; keep leaves only
                grads[i] = Some(g);
                let keep = grads[i].take();
                drop(keep);
            } else {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| self.with_value(b, |bv| {
            assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
            av + bv
        }));
        self.push(out, vec![
            (a.0, Box::new(|g: &ArrayD<S>| g.clone())),
            (b.0, Box::new(|g: &ArrayD<S>| g.clone())),
        ])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| self.with_value(b, |bv| {
            assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
            av - bv
        }));
        self.push(out, vec![
            (a.0, Box::new(|g: &ArrayD<S>| g.clone())),
            (b.0, Box::new(|g: &ArrayD<S>| g.mapv(|x| -x))),
        ])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (out, av, bv) = self.with_value(a, |av| self.with_value(b, |bv| {
            assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
            (av * bv, av.clone(), bv.clone())
        }));
        self.push(out, vec![
            (a.0, Box::new(move |g: &ArrayD<S>| g * &bv)),
            (b.0, Box::new(move |g: &ArrayD<S>| g * &av)),
        ])
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let out = self.with_value(a, |av| av.mapv(|x| x * c));
        self.push(out, vec![(a.0, Box::new(move |g: &ArrayD<S>| g.mapv(|x| x * c)))])
    }

    /// Add a rank-1 bias along the last axis: `[.., D] + [D]`.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let out = self.with_value(x, |xv| self.with_value(b, |bv| {
            let d = *xv.shape().last().expect("add_bias: rank-0 input");
            assert_eq!(bv.shape(), [d], "add_bias: bias shape mismatch");
            xv + &bv.view().into_shape_with_order(IxDyn(&[d])).unwrap()
        }));
        self.push(out, vec![
            (x.0, Box::new(|g: &ArrayD<S>| g.clone())),
            (b.0, Box::new(|g: &ArrayD<S>| {
                let d = *g.shape().last().unwrap();
                let g2 = g
                    .view()
                    .into_shape_with_order(IxDyn(&[g.len() / d, d]))
                    .unwrap()
                    .to_owned();
                g2.sum_axis(Axis(0)).into_dyn()
            })),
        ])
    }

    /// Broadcast `t` along a new leading axis of length `n` and add it to `x`:
    /// `[n, ..] + [..]`.
    pub fn add_bcast0(&self, x: Var, t: Var) -> Var {
        let out = self.with_value(x, |xv| self.with_value(t, |tv| {
            assert_eq!(&xv.shape()[1..], tv.shape(), "add_bcast0: shape mismatch");
            let mut o = xv.clone();
            for mut row in o.outer_iter_mut() {
                row += &tv.view();
            }
            o
        }));
        self.push(out, vec![
            (x.0, Box::new(|g: &ArrayD<S>| g.clone())),
            (t.0, Box::new(|g: &ArrayD<S>| g.sum_axis(Axis(0)))),
        ])
    }

    /// Add a single-element parameter to every entry of `x`.
    pub fn add_scalar(&self, x: Var, s: Var) -> Var {
        let out = self.with_value(x, |xv| self.with_value(s, |sv| {
            assert_eq!(sv.len(), 1, "add_scalar: parameter must hold one value");
            let c = *sv.iter().next().unwrap();
            xv.mapv(|v| v + c)
        }));
        let s_shape: Vec<usize> = self.shape(s);
        self.push(out, vec![
            (x.0, Box::new(|g: &ArrayD<S>| g.clone())),
            (s.0, Box::new(move |g: &ArrayD<S>| {
                let total = g.iter().fold(S::zero(), |acc, &v| acc + v);
                ArrayD::from_elem(IxDyn(&s_shape), total)
            })),
        ])
    }

    /// Broadcast `t` to shape `[n, t.shape..]`.
    pub fn expand0(&self, t: Var, n: usize) -> Var {
        let out = self.with_value(t, |tv| {
            let mut shape = vec![n];
            shape.extend_from_slice(tv.shape());
            let mut o = ArrayD::zeros(IxDyn(&shape));
            for mut row in o.outer_iter_mut() {
                row.assign(&tv.view());
            }
            o
        });
        self.push(out, vec![(t.0, Box::new(|g: &ArrayD<S>| g.sum_axis(Axis(0))))])
    }

    // ---- linear algebra ----

    /// `[.., K] x [K, M] -> [.., M]`. Leading axes of `x` are batch axes.
    pub fn matmul(&self, x: Var, w: Var) -> Var {
        let (out, x2, w2) = self.with_value(x, |xv| self.with_value(w, |wv| {
            let k = *xv.shape().last().expect("matmul: rank-0 input");
            assert_eq!(wv.ndim(), 2, "matmul: weight must be rank 2");
            assert_eq!(wv.shape()[0], k, "matmul: inner dim mismatch");
            let m = wv.shape()[1];
            let l = xv.len() / k;
            let x2 = xv
                .to_owned()
                .into_shape_with_order(IxDyn(&[l, k]))
                .unwrap()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let w2 = wv.to_owned().into_dimensionality::<ndarray::Ix2>().unwrap();
            let y2 = x2.dot(&w2);
            let mut out_shape = xv.shape().to_vec();
            *out_shape.last_mut().unwrap() = m;
            let out = y2.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
            (out, x2, w2)
        }));
        let w2_for_x = w2.clone();
        let x_shape: Vec<usize> = self.shape(x);
        self.push(out, vec![
            (x.0, Box::new(move |g: &ArrayD<S>| {
                let m = *g.shape().last().unwrap();
                let l = g.len() / m;
                let g2 = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[l, m]))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                g2.dot(&w2_for_x.t())
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&x_shape))
                    .unwrap()
            })),
            (w.0, Box::new(move |g: &ArrayD<S>| {
                let m = *g.shape().last().unwrap();
                let l = g.len() / m;
                let g2 = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[l, m]))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                x2.t().dot(&g2).into_dyn()
            })),
        ])
    }

    /// Batched matmul: `[.., N, K] x [.., K, M] -> [.., N, M]` with equal
    /// leading axes on both operands.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let (out, a_val, b_val) = self.with_value(a, |av| self.with_value(b, |bv| {
            assert!(av.ndim() >= 2 && bv.ndim() >= 2, "bmm: rank must be >= 2");
            assert_eq!(av.ndim(), bv.ndim(), "bmm: rank mismatch");
            let ra = av.ndim();
            assert_eq!(&av.shape()[..ra - 2], &bv.shape()[..ra - 2], "bmm: batch mismatch");
            assert_eq!(av.shape()[ra - 1], bv.shape()[ra - 2], "bmm: inner dim mismatch");
            (batched_mm(&av.view(), &bv.view()), av.clone(), bv.clone())
        }));
        let a_for_b = a_val.clone();
        self.push(out, vec![
            (a.0, Box::new(move |g: &ArrayD<S>| {
                // dA = g . B^T
                let bt = swap_last2(&b_val);
                batched_mm(&g.view(), &bt.view())
            })),
            (b.0, Box::new(move |g: &ArrayD<S>| {
                // dB = A^T . g
                let at = swap_last2(&a_for_b);
                batched_mm(&at.view(), &g.view())
            })),
        ])
    }

    pub fn transpose_last2(&self, a: Var) -> Var {
        let out = self.with_value(a, |av| swap_last2(av));
        self.push(out, vec![(a.0, Box::new(|g: &ArrayD<S>| swap_last2(g)))])
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let axes_own = axes.to_vec();
        let out = self.with_value(a, |av| {
            assert_eq!(av.ndim(), axes_own.len(), "permute: axes rank mismatch");
            av.view()
                .permuted_axes(IxDyn(&axes_own))
                .as_standard_layout()
                .to_owned()
        });
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(out, vec![(a.0, Box::new(move |g: &ArrayD<S>| {
            g.view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned()
        }))])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let orig: Vec<usize> = self.shape(a);
        let out = self.with_value(a, |av| {
            av.to_owned().into_shape_with_order(IxDyn(shape)).unwrap()
        });
        self.push(out, vec![(a.0, Box::new(move |g: &ArrayD<S>| {
            g.to_owned().into_shape_with_order(IxDyn(&orig)).unwrap()
        }))])
    }

    /// Select one index along axis 1 of a rank-3 tensor: `[B, T, C] -> [B, C]`.
    pub fn select_axis1(&self, x: Var, idx: usize) -> Var {
        let xshape = self.shape(x);
        assert_eq!(xshape.len(), 3, "select_axis1: rank-3 input expected");
        assert!(idx < xshape[1], "select_axis1: index out of range");
        let out = self.with_value(x, |xv| {
            xv.index_axis(Axis(1), idx).as_standard_layout().to_owned()
        });
        self.push(out, vec![(x.0, Box::new(move |g: &ArrayD<S>| {
            let mut full = ArrayD::zeros(IxDyn(&xshape));
            full.index_axis_mut(Axis(1), idx).assign(g);
            full
        }))])
    }

    // ---- nonlinearities ----

    pub fn relu(&self, a: Var) -> Var {
        let (out, mask) = self.with_value(a, |av| {
            let out = av.mapv(|x| if x > S::zero() { x } else { S::zero() });
            let mask = av.mapv(|x| if x > S::zero() { S::one() } else { S::zero() });
            (out, mask)
        });
        self.push(out, vec![(a.0, Box::new(move |g: &ArrayD<S>| g * &mask))])
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF via erf.
    pub fn gelu(&self, a: Var) -> Var {
        let (out, deriv) = self.with_value(a, |av| {
            let half = S::from_f64(0.5);
            let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let out = av.mapv(gelu_val);
            let deriv = av.mapv(|x| {
                let phi_cdf = half * (S::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-x * x * half).exp();
                phi_cdf + x * pdf
            });
            (out, deriv)
        });
        self.push(out, vec![(a.0, Box::new(move |g: &ArrayD<S>| g * &deriv))])
    }

    pub fn softmax_last(&self, a: Var) -> Var {
        let out = self.with_value(a, |av| {
            let d = *av.shape().last().expect("softmax: rank-0 input");
            let mut o = av.clone();
            for mut row in o
                .view_mut()
                .into_shape_with_order(IxDyn(&[av.len() / d, d]))
                .unwrap()
                .outer_iter_mut()
            {
                let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            o
        });
        let y = out.clone();
        self.push(out, vec![(a.0, Box::new(move |g: &ArrayD<S>| {
            let d = *y.shape().last().unwrap();
            let rows = y.len() / d;
            let y2 = y.view().into_shape_with_order(IxDyn(&[rows, d])).unwrap();
            let g2 = g.view().into_shape_with_order(IxDyn(&[rows, d])).unwrap();
            let mut dx = ArrayD::zeros(IxDyn(&[rows, d]));
            for r in 0..rows {
                let yr = y2.index_axis(Axis(0), r);
                let gr = g2.index_axis(Axis(0), r);
                let dot = yr.iter().zip(gr.iter()).fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                let mut dr = dx.index_axis_mut(Axis(0), r);
                for j in 0..d {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            dx.into_shape_with_order(IxDyn(y.shape())).unwrap()
        }))])
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let (out, xhat, inv_std, gamma_val) =
            self.with_value(x, |xv| self.with_value(gamma, |gv| self.with_value(beta, |bv| {
                let d = *xv.shape().last().expect("layer_norm: rank-0 input");
                assert_eq!(gv.shape(), [d], "layer_norm: gamma shape mismatch");
                assert_eq!(bv.shape(), [d], "layer_norm: beta shape mismatch");
                let rows = xv.len() / d;
                let x2 = xv.view().into_shape_with_order(IxDyn(&[rows, d])).unwrap();
                let mut xhat = ArrayD::zeros(IxDyn(&[rows, d]));
                let mut inv_std = ArrayD::zeros(IxDyn(&[rows]));
                let dn = S::from_f64(d as f64);
                for r in 0..rows {
                    let row = x2.index_axis(Axis(0), r);
                    let mean = row.sum() / dn;
                    let var = row.iter().fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
                    let is = S::one() / (var + eps).sqrt();
                    inv_std[r] = is;
                    let mut hr = xhat.index_axis_mut(Axis(0), r);
                    for j in 0..d {
                        hr[j] = (row[j] - mean) * is;
                    }
                }
                let mut out = xhat.clone();
                for mut row in out.outer_iter_mut() {
                    for j in 0..d {
                        row[j] = row[j] * gv[j] + bv[j];
                    }
                }
                let out = out.into_shape_with_order(IxDyn(xv.shape())).unwrap();
                (out, xhat, inv_std, gv.clone())
            })));
        let xhat_for_gamma = xhat.clone();
        let x_shape: Vec<usize> = self.shape(x);
        self.push(out, vec![
            (x.0, Box::new(move |g: &ArrayD<S>| {
                let d = *g.shape().last().unwrap();
                let rows = g.len() / d;
                let g2 = g.view().into_shape_with_order(IxDyn(&[rows, d])).unwrap();
                let dn = S::from_f64(d as f64);
                let mut dx = ArrayD::zeros(IxDyn(&[rows, d]));
                for r in 0..rows {
                    let gr = g2.index_axis(Axis(0), r);
                    let hr = xhat.index_axis(Axis(0), r);
                    let is = inv_std[r];
                    let mut sum_gg = S::zero();
                    let mut sum_ggh = S::zero();
                    for j in 0..d {
                        let gg = gr[j] * gamma_val[j];
                        sum_gg = sum_gg + gg;
                        sum_ggh = sum_ggh + gg * hr[j];
                    }
                    let mean_gg = sum_gg / dn;
                    let mean_ggh = sum_ggh / dn;
                    let mut dr = dx.index_axis_mut(Axis(0), r);
                    for j in 0..d {
                        let gg = gr[j] * gamma_val[j];
                        dr[j] = (gg - mean_gg - hr[j] * mean_ggh) * is;
                    }
                }
                dx.into_shape_with_order(IxDyn(&x_shape)).unwrap()
            })),
            (gamma.0, Box::new(move |g: &ArrayD<S>| {
                let d = *g.shape().last().unwrap();
                let rows = g.len() / d;
                let g2 = g.view().into_shape_with_order(IxDyn(&[rows, d])).unwrap();
                let mut dg = ArrayD::zeros(IxDyn(&[d]));
                for r in 0..rows {
                    let gr = g2.index_axis(Axis(0), r);
                    let hr = xhat_for_gamma.index_axis(Axis(0), r);
                    for j in 0..d {
                        dg[j] = dg[j] + gr[j] * hr[j];
                    }
                }
                dg
            })),
            (beta.0, Box::new(|g: &ArrayD<S>| {
                let d = *g.shape().last().unwrap();
                let g2 = g
                    .view()
                    .into_shape_with_order(IxDyn(&[g.len() / d, d]))
                    .unwrap()
                    .to_owned();
                g2.sum_axis(Axis(0)).into_dyn()
            })),
        ])
    }

    // ---- reductions / losses ----

    pub fn mean_all(&self, a: Var) -> Var {
        let (out, n) = self.with_value(a, |av| {
            let n = av.len();
            let sum = av.iter().fold(S::zero(), |acc, &v| acc + v);
            (
                ArrayD::from_elem(IxDyn(&[]), sum / S::from_f64(n as f64)),
                n,
            )
        });
        let a_shape: Vec<usize> = self.shape(a);
        self.push(out, vec![(a.0, Box::new(move |g: &ArrayD<S>| {
            let gv = *g.iter().next().unwrap() / S::from_f64(n as f64);
            ArrayD::from_elem(IxDyn(&a_shape), gv)
        }))])
    }

    /// Numerically stable binary cross-entropy with logits, mean over all
    /// elements. `targets` is a constant (no gradient), values in {0, 1}.
    pub fn bce_with_logits(&self, logits: Var, targets: &ArrayD<S>) -> Var {
        let targets = targets.clone();
        let (out, sig_minus_y, n) = self.with_value(logits, |zv| {
            assert_eq!(zv.shape(), targets.shape(), "bce: shape mismatch");
            let n = zv.len();
            let mut acc = S::zero();
            let mut smy = ArrayD::zeros(IxDyn(zv.shape()));
            for (i, (&z, &y)) in zv.iter().zip(targets.iter()).enumerate() {
                // max(z,0) - z*y + ln(1 + exp(-|z|))
                let zmax = if z > S::zero() { z } else { S::zero() };
                let term = zmax - z * y + (S::one() + (-z.abs()).exp()).ln();
                acc = acc + term;
                let sig = S::one() / (S::one() + (-z).exp());
                smy.as_slice_mut().unwrap()[i] = sig - y;
            }
            (
                ArrayD::from_elem(IxDyn(&[]), acc / S::from_f64(n as f64)),
                smy,
                n,
            )
        });
        self.push(out, vec![(logits.0, Box::new(move |g: &ArrayD<S>| {
            let gv = *g.iter().next().unwrap() / S::from_f64(n as f64);
            sig_minus_y.mapv(|v| v * gv)
        }))])
    }

    // ---- spatial ops ----

    /// Transposed 2x2 stride-2 convolution (each input pixel expands into a
    /// 2x2 output block): `[B, Cin, H, W] x [Cin, Cout, 2, 2] -> [B, Cout, 2H, 2W]`.
    pub fn deconv2x(&self, x: Var, kernel: Var, bias: Var) -> Var {
        let (out, x2, k2, dims) = self.with_value(x, |xv| {
            self.with_value(kernel, |kv| self.with_value(bias, |bv| {
                assert_eq!(xv.ndim(), 4, "deconv2x: input must be rank 4");
                assert_eq!(kv.ndim(), 4, "deconv2x: kernel must be rank 4");
                let (b, cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                assert_eq!(kv.shape()[0], cin, "deconv2x: kernel cin mismatch");
                let cout = kv.shape()[1];
                assert_eq!(&kv.shape()[2..], &[2, 2], "deconv2x: kernel must be 2x2");
                assert_eq!(bv.shape(), [cout], "deconv2x: bias shape mismatch");
                // rows of x2 are (b, h, w) sites
                let x2 = xv
                    .view()
                    .permuted_axes(IxDyn(&[0, 2, 3, 1]))
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[b * h * w, cin]))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let k2 = kv
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[cin, cout * 4]))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let y2 = x2.dot(&k2); // [BHW, Cout*4]
                // scatter into [B, Cout, 2H, 2W]
                let mut out = ArrayD::zeros(IxDyn(&[b, cout, 2 * h, 2 * w]));
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            let row = (bi * h + hi) * w + wi;
                            for co in 0..cout {
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        out[[bi, co, 2 * hi + di, 2 * wi + dj]] =
                                            y2[[row, (co * 2 + di) * 2 + dj]] + bv[co];
                                    }
                                }
                            }
                        }
                    }
                }
                (out, x2, k2, (b, cin, h, w, cout))
            }))
        });
        let (b, cin, h, w, cout) = dims;
        let k2_for_x = k2.clone();
        self.push(out, vec![
            (x.0, Box::new(move |g: &ArrayD<S>| {
                let g2 = gather_deconv_grad(g, b, cout, h, w);
                let dx2 = g2.dot(&k2_for_x.t()); // [BHW, Cin]
                dx2.into_dyn()
                    .into_shape_with_order(IxDyn(&[b, h, w, cin]))
                    .unwrap()
                    .permuted_axes(IxDyn(&[0, 3, 1, 2]))
                    .as_standard_layout()
                    .to_owned()
            })),
            (kernel.0, Box::new(move |g: &ArrayD<S>| {
                let g2 = gather_deconv_grad(g, b, cout, h, w);
                x2.t()
                    .dot(&g2)
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[cin, cout, 2, 2]))
                    .unwrap()
            })),
            (bias.0, Box::new(move |g: &ArrayD<S>| {
                let mut db = ArrayD::zeros(IxDyn(&[cout]));
                for bi in 0..b {
                    for co in 0..cout {
                        let mut acc = S::zero();
                        for hi in 0..2 * h {
                            for wi in 0..2 * w {
                                acc = acc + g[[bi, co, hi, wi]];
                            }
                        }
                        db[co] = db[co] + acc;
                    }
                }
                db
            })),
        ])
    }

    /// Bilinear resize with half-pixel centers (align_corners = false):
    /// `[B, C, h, w] -> [B, C, out_h, out_w]`.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xshape = self.shape(x);
        assert_eq!(xshape.len(), 4, "bilinear_resize: input must be rank 4");
        let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let rows = resize_taps(h, out_h);
        let cols = resize_taps(w, out_w);
        let out = self.with_value(x, |xv| {
            let mut out = ArrayD::zeros(IxDyn(&[b, c, out_h, out_w]));
            for bi in 0..b {
                for ci in 0..c {
                    for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                            let one = 1.0f64;
                            let v = xv[[bi, ci, y0, x0]].to_f64() * (one - wy) * (one - wx)
                                + xv[[bi, ci, y0, x1]].to_f64() * (one - wy) * wx
                                + xv[[bi, ci, y1, x0]].to_f64() * wy * (one - wx)
                                + xv[[bi, ci, y1, x1]].to_f64() * wy * wx;
                            out[[bi, ci, oy, ox]] = S::from_f64(v);
                        }
                    }
                }
            }
            out
        });
        self.push(out, vec![(x.0, Box::new(move |g: &ArrayD<S>| {
            let mut dx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for bi in 0..b {
                for ci in 0..c {
                    for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                            let gv = g[[bi, ci, oy, ox]].to_f64();
                            dx[[bi, ci, y0, x0]] =
                                dx[[bi, ci, y0, x0]] + S::from_f64(gv * (1.0 - wy) * (1.0 - wx));
                            dx[[bi, ci, y0, x1]] =
                                dx[[bi, ci, y0, x1]] + S::from_f64(gv * (1.0 - wy) * wx);
                            dx[[bi, ci, y1, x0]] =
                                dx[[bi, ci, y1, x0]] + S::from_f64(gv * wy * (1.0 - wx));
                            dx[[bi, ci, y1, x1]] =
                                dx[[bi, ci, y1, x1]] + S::from_f64(gv * wy * wx);
                        }
                    }
                }
            }
            dx
        }))])
    }
}

/// Source taps and lerp weight for one output coordinate axis.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let s = (o as f64 + 0.5) * (src as f64 / dst as f64) - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (src - 1) as f64 {
                (src - 1, src - 1, 0.0)
            } else {
                let i0 = s.floor() as usize;
                (i0, i0 + 1, s - i0 as f64)
            }
        })
        .collect()
}

fn swap_last2<S: Scalar>(a: &ArrayD<S>) -> ArrayD<S> {
    let r = a.ndim();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 1, r - 2);
    a.view()
        .permuted_axes(IxDyn(&axes))
        .as_standard_layout()
        .to_owned()
}

/// Multiply stacks of matrices with equal leading axes.
fn batched_mm<S: Scalar>(a: &ArrayViewD<'_, S>, b: &ArrayViewD<'_, S>) -> ArrayD<S> {
    let ra = a.ndim();
    let (n, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let m = b.shape()[ra - 1];
    let l: usize = a.shape()[..ra - 2].iter().product();
    let a3 = a
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(&[l, n, k]))
        .unwrap();
    let b3 = b
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(&[l, k, m]))
        .unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[l, n, m]));
    for li in 0..l {
        let a2 = a3
            .index_axis(Axis(0), li)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b2 = b3
            .index_axis(Axis(0), li)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        out.index_axis_mut(Axis(0), li).assign(&a2.dot(&b2));
    }
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.push(n);
    shape.push(m);
    out.into_shape_with_order(IxDyn(&shape)).unwrap()
}

/// Inverse of the deconv scatter: collect `[B, Cout, 2H, 2W]` gradients back
/// into `[BHW, Cout*4]` rows.
fn gather_deconv_grad<S: Scalar>(
    g: &ArrayD<S>,
    b: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> ndarray::Array2<S> {
    let mut g2 = ndarray::Array2::zeros((b * h * w, cout * 4));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let row = (bi * h + hi) * w + wi;
                for co in 0..cout {
                    for di in 0..2 {
                        for dj in 0..2 {
                            g2[[row, (co * 2 + di) * 2 + dj]] =
                                g[[bi, co, 2 * hi + di, 2 * wi + dj]];
                        }
                    }
                }
            }
        }
    }
    g2
}

/// Elementwise logistic function on a plain array (no tape involvement).
pub fn sigmoid<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    x.mapv(|v| S::one() / (S::one() + (-v).exp()))
}

/// Exact (erf-based) GELU on one value; the tape op applies this pointwise.
pub fn gelu_val<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (S::one() + (x * inv_sqrt2).erf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Check d(mean(f(x) * r))/dx against central differences for every input.
    fn check_grad<F>(inputs: &[ArrayD<f64>], f: F)
    where
        F: Fn(&Tape<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars);
        let r = rand_array(&tape.shape(out), &mut rng);
        let weighted = tape.mul(out, tape.leaf(r.clone()));
        let loss = tape.mean_all(weighted);
        let grads = tape.backward(loss);

        let h = 1e-6;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).expect("missing gradient").clone();
            for flat in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[vi].as_slice_mut().unwrap()[flat] += h;
                let mut minus = inputs.to_vec();
                minus[vi].as_slice_mut().unwrap()[flat] -= h;
                let eval = |ins: &[ArrayD<f64>]| {
                    let t = Tape::new();
                    let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
                    let o = f(&t, &vs);
                    let w = t.mul(o, t.leaf(r.clone()));
                    t.scalar(t.mean_all(w))
                };
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[flat];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "grad mismatch input {vi} flat {flat}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_add_mul_scale() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = rand_array(&[2, 3], &mut rng);
        let b = rand_array(&[2, 3], &mut rng);
        check_grad(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check_grad(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check_grad(&[a.clone(), b], |t, v| t.sub(v[0], v[1]));
        check_grad(&[a], |t, v| t.scale(v[0], -1.7));
    }

    #[test]
    fn grad_matmul_and_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = rand_array(&[2, 3, 4], &mut rng);
        let w = rand_array(&[4, 5], &mut rng);
        let b = rand_array(&[5], &mut rng);
        check_grad(&[x, w, b], |t, v| t.add_bias(t.matmul(v[0], v[1]), v[2]));
    }

    #[test]
    fn grad_bmm_transpose() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = rand_array(&[2, 2, 3, 4], &mut rng);
        let b = rand_array(&[2, 2, 4, 2], &mut rng);
        check_grad(&[a.clone(), b], |t, v| t.bmm(v[0], v[1]));
        check_grad(&[a], |t, v| t.transpose_last2(v[0]));
    }

    #[test]
    fn grad_softmax_layer_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = rand_array(&[3, 5], &mut rng);
        check_grad(&[x.clone()], |t, v| t.softmax_last(v[0]));
        let gamma = rand_array(&[5], &mut rng);
        let beta = rand_array(&[5], &mut rng);
        check_grad(&[x, gamma, beta], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6));
    }

    #[test]
    fn grad_activations() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        // keep away from the relu kink where finite differences are invalid
        let x = rand_array(&[4, 4], &mut rng).mapv(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        check_grad(&[x.clone()], |t, v| t.relu(v[0]));
        check_grad(&[x], |t, v| t.gelu(v[0]));
    }

    #[test]
    fn grad_reshape_permute_select() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = rand_array(&[2, 3, 4], &mut rng);
        check_grad(&[x.clone()], |t, v| t.reshape(v[0], &[2, 12]));
        check_grad(&[x.clone()], |t, v| t.permute(v[0], &[2, 0, 1]));
        check_grad(&[x], |t, v| t.select_axis1(v[0], 1));
    }

    #[test]
    fn grad_broadcasts() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_array(&[3, 2, 4], &mut rng);
        let tkn = rand_array(&[2, 4], &mut rng);
        check_grad(&[x.clone(), tkn.clone()], |t, v| t.add_bcast0(v[0], v[1]));
        check_grad(&[tkn], |t, v| t.expand0(v[0], 3));
        let s = rand_array(&[1], &mut rng);
        check_grad(&[x, s], |t, v| t.add_scalar(v[0], v[1]));
    }

    #[test]
    fn grad_deconv_and_resize() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = rand_array(&[2, 3, 2, 2], &mut rng);
        let k = rand_array(&[3, 2, 2, 2], &mut rng);
        let b = rand_array(&[2], &mut rng);
        check_grad(&[x.clone(), k, b], |t, v| t.deconv2x(v[0], v[1], v[2]));
        check_grad(&[x], |t, v| t.bilinear_resize(v[0], 5, 7));
    }

    #[test]
    fn grad_bce() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z = rand_array(&[2, 4], &mut rng);
        let y = ArrayD::from_shape_fn(IxDyn(&[2, 4]), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let loss = tape.bce_with_logits(zv, &y);
        let grads = tape.backward(loss);
        let analytic = grads.get(zv).unwrap().clone();
        let h = 1e-6;
        for flat in 0..z.len() {
            let mut plus = z.clone();
            plus.as_slice_mut().unwrap()[flat] += h;
            let mut minus = z.clone();
            minus.as_slice_mut().unwrap()[flat] -= h;
            let eval = |arr: &ArrayD<f64>| {
                let t = Tape::new();
                let v = t.leaf(arr.clone());
                t.scalar(t.bce_with_logits(v, &y))
            };
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[flat];
            assert!((a - numeric).abs() < 1e-6, "bce grad mismatch at {flat}");
        }
    }

    #[test]
    fn gradient_accumulates_over_shared_node() {
        // y = x*x + x used twice; dy/dx = 2x + 1
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let sq = tape.mul(x, x);
        let sum = tape.add(sq, x);
        let loss = tape.mean_all(sum);
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap()[[0]];
        assert!((g - 7.0).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_ln2_at_zero_logits() {
        let tape: Tape<f64> = Tape::new();
        let z = tape.leaf(ArrayD::zeros(IxDyn(&[4, 4])));
        let y = ArrayD::from_elem(IxDyn(&[4, 4]), 1.0);
        let loss = tape.scalar(tape.bce_with_logits(z, &y));
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bilinear_resize_preserves_constant() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 2.5));
        let y = tape.value(tape.bilinear_resize(x, 16, 16));
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
