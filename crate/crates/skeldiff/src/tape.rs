//! Minimal reverse-mode autodiff over dynamic-dimensional `f64` tensors.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays it in
//! reverse. Nodes are identified by insertion order, which is already a
//! topological order, so the backward sweep is a single reverse scan.
//! Inference-only passes can skip closure recording with [`Tape::no_grad`].

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type Back = Box<dyn Fn(&ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    back: Option<Back>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// Tape that records values but no backward closures.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    fn push(&self, value: ArrayD<f64>, back: Option<Back>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back: if self.grad_enabled { back } else { None },
        });
        Var(nodes.len() - 1)
    }

    /// Gradient-tracked input.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients; nodes not
    /// on a path to the root have none.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &nodes[i].back {
                for (pid, contrib) in back(&g) {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &str) -> (Rc<ArrayD<f64>>, Rc<ArrayD<f64>>) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{op}: shape mismatch");
        (va, vb)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "add");
        let out = &*va + &*vb;
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.clone())])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "sub");
        let out = &*va - &*vb;
        self.push(out, Some(Box::new(move |g| vec![(a.0, g.clone()), (b.0, -g)])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "mul");
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, g * &*vb), (b.0, g * &*va)])),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        self.push(&*va * k, Some(Box::new(move |g| vec![(a.0, g * k)])))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        self.push(&*va + k, Some(Box::new(move |g| vec![(a.0, g.clone())])))
    }

    /// Broadcast-add a 1-D vector over the last axis.
    pub fn add_vec(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = *vx.shape().last().expect("add_vec: x must have at least one axis");
        assert_eq!(vb.shape(), [c], "add_vec: vector width mismatch");
        let bv = vb.view().into_shape_with_order(c).unwrap().to_owned();
        let mut out = (*vx).clone();
        for mut row in out.rows_mut() {
            row += &bv;
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                let db = sum_to_last_axis(g);
                vec![(x.0, g.clone()), (b.0, db.into_dyn())]
            })),
        )
    }

    /// Broadcast-multiply a 1-D vector over the last axis.
    pub fn mul_vec(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let c = *vx.shape().last().expect("mul_vec: x must have at least one axis");
        assert_eq!(vs.shape(), [c], "mul_vec: vector width mismatch");
        let sv = vs.view().into_shape_with_order(c).unwrap().to_owned();
        let mut out = (*vx).clone();
        for mut row in out.rows_mut() {
            row *= &sv;
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                for mut row in dx.rows_mut() {
                    row *= &sv;
                }
                let ds = sum_to_last_axis(&(g * &*vx));
                vec![(x.0, dx), (s.0, ds.into_dyn())]
            })),
        )
    }

    /// Contracts the last axis of `x` with a 2-D weight: `y[..., m] = sum_k
    /// x[..., k] w[k, m]`. Gradients flow to both operands.
    pub fn matmul(&self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.ndim(), 2, "matmul: weight must be 2-D");
        let k = *vx.shape().last().expect("matmul: x must have at least one axis");
        let (wk, m) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(k, wk, "matmul: contraction width mismatch");
        let batch: usize = vx.len() / k;
        let x2 = vx.view().into_shape_with_order((batch, k)).unwrap();
        let w2 = vw.view().into_shape_with_order((wk, m)).unwrap();
        let y2 = x2.dot(&w2);
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = m;
        let out = y2.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = g.view().into_shape_with_order((batch, m)).unwrap();
                let x2 = vx.view().into_shape_with_order((batch, k)).unwrap();
                let w2 = vw.view().into_shape_with_order((k, m)).unwrap();
                let dx = g2.dot(&w2.t()).into_shape_with_order(IxDyn(vx.shape())).unwrap();
                let dw = x2.t().dot(&g2).into_dyn();
                vec![(x.0, dx), (w.0, dw)]
            })),
        )
    }

    /// Batched matrix product of `[b, m, k]` and `[b, k, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ndim(), 3, "bmm: lhs must be 3-D");
        assert_eq!(vb.ndim(), 3, "bmm: rhs must be 3-D");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (bs2, k2, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(bs, bs2, "bmm: batch mismatch");
        assert_eq!(k, k2, "bmm: contraction mismatch");
        let a3 = va.view().into_shape_with_order((bs, m, k)).unwrap();
        let b3 = vb.view().into_shape_with_order((bs, k, n)).unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
        {
            let mut o3 = out.view_mut().into_shape_with_order((bs, m, n)).unwrap();
            for i in 0..bs {
                o3.index_axis_mut(Axis(0), i)
                    .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
            }
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                let g3 = g.view().into_shape_with_order((bs, m, n)).unwrap();
                let a3 = va.view().into_shape_with_order((bs, m, k)).unwrap();
                let b3 = vb.view().into_shape_with_order((bs, k, n)).unwrap();
                let mut da = ArrayD::zeros(IxDyn(&[bs, m, k]));
                let mut db = ArrayD::zeros(IxDyn(&[bs, k, n]));
                {
                    let mut da3 = da.view_mut().into_shape_with_order((bs, m, k)).unwrap();
                    let mut db3 = db.view_mut().into_shape_with_order((bs, k, n)).unwrap();
                    for i in 0..bs {
                        let gi = g3.index_axis(Axis(0), i);
                        da3.index_axis_mut(Axis(0), i)
                            .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                        db3.index_axis_mut(Axis(0), i)
                            .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                    }
                }
                vec![(a.0, da), (b.0, db)]
            })),
        )
    }

    /// Contracts axis `axis` of `x` with a constant matrix: the axis of size
    /// `m.ncols()` is replaced by one of size `m.nrows()`. The matrix receives
    /// no gradient; the backward pass applies its transpose.
    pub fn axis_apply(&self, m: &Array2<f64>, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape()[axis], m.ncols(), "axis_apply: axis width mismatch");
        let out = apply_matrix_along_axis(m, &vx, axis);
        let mt = m.t().to_owned();
        self.push(
            out,
            Some(Box::new(move |g| vec![(x.0, apply_matrix_along_axis(&mt, g, axis))])),
        )
    }

    pub fn gelu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(gelu_scalar);
        self.push(
            out,
            Some(Box::new(move |g| {
                let dx = ndarray::Zip::from(g).and(&*vx).map_collect(|&gi, &xi| gi * gelu_grad(xi));
                vec![(x.0, dx)]
            })),
        )
    }

    pub fn exp(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Rc::new(vx.mapv(f64::exp));
        let out_c = out.clone();
        self.push(
            (*out).clone(),
            Some(Box::new(move |g| vec![(x.0, g * &*out_c)])),
        )
    }

    /// Elementwise |x| with sign(0) = 0 as the subgradient.
    pub fn abs(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(f64::abs);
        self.push(
            out,
            Some(Box::new(move |g| {
                let dx = ndarray::Zip::from(g)
                    .and(&*vx)
                    .map_collect(|&gi, &xi| gi * if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 });
                vec![(x.0, dx)]
            })),
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = ArrayD::from_elem(IxDyn(&[]), vx.sum());
        let shape = vx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g| {
                let gv = *g.first().expect("scalar gradient");
                vec![(x.0, ArrayD::from_elem(IxDyn(&shape), gv))]
            })),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = (*vx).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let y = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = g * &*y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    ndarray::Zip::from(&mut drow).and(yrow).for_each(|d, &yi| *d -= dot * yi);
                }
                vec![(x.0, dx)]
            })),
        )
    }

    /// Normalizes each last-axis row to zero mean / unit variance (no affine).
    pub fn layernorm_last(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let mut out = (*vx).clone();
        let c = *vx.shape().last().unwrap() as f64;
        let mut inv_stds = Vec::with_capacity(vx.len() / c as usize);
        for mut row in out.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_stds.push(inv);
        }
        let y = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                for ((mut drow, yrow), &inv) in
                    dx.rows_mut().into_iter().zip(y.rows()).zip(inv_stds.iter())
                {
                    let gm = drow.sum() / c;
                    let gym = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum::<f64>() / c;
                    ndarray::Zip::from(&mut drow)
                        .and(yrow)
                        .for_each(|d, &yi| *d = inv * (*d - gm - yi * gym));
                }
                vec![(x.0, dx)]
            })),
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = vx
            .as_standard_layout()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    x.0,
                    g.as_standard_layout().into_shape_with_order(IxDyn(&old)).unwrap().to_owned(),
                )]
            })),
        )
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let vx = self.value(x);
        let axes_v = axes.to_vec();
        let out = vx.view().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes_v.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    x.0,
                    g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned(),
                )]
            })),
        )
    }

    pub fn concat_last(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let last = va.ndim() - 1;
        let ca = va.shape()[last];
        // concatenate along a trailing axis yields non-standard strides;
        // normalize so downstream reshapes stay valid.
        let out = ndarray::concatenate(Axis(last), &[va.view(), vb.view()])
            .expect("concat_last: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g| {
                let ga = g.slice_axis(Axis(last), ndarray::Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(Axis(last), ndarray::Slice::from(ca..)).to_owned();
                vec![(a.0, ga), (b.0, gb)]
            })),
        )
    }

    pub fn slice_last(&self, x: Var, start: usize, end: usize) -> Var {
        let vx = self.value(x);
        let last = vx.ndim() - 1;
        let c = vx.shape()[last];
        assert!(start <= end && end <= c, "slice_last: range out of bounds");
        let out = vx.slice_axis(Axis(last), ndarray::Slice::from(start..end)).to_owned();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut full_shape = g.shape().to_vec();
                full_shape[last] = c;
                let mut dx = ArrayD::zeros(IxDyn(&full_shape));
                dx.slice_axis_mut(Axis(last), ndarray::Slice::from(start..end)).assign(g);
                vec![(x.0, dx)]
            })),
        )
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Sums all axes except the last, returning a 1-D vector.
fn sum_to_last_axis(g: &ArrayD<f64>) -> Array1<f64> {
    let c = *g.shape().last().unwrap();
    let g2 = g.view().into_shape_with_order((g.len() / c, c)).unwrap();
    g2.sum_axis(Axis(0))
}

/// Applies `y[.. a ..] = sum_b m[a, b] x[.. b ..]` along the given axis.
fn apply_matrix_along_axis(m: &Array2<f64>, x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let mut perm: Vec<usize> = (0..x.ndim()).collect();
    perm.swap(0, axis);
    let moved = x.view().permuted_axes(IxDyn(&perm));
    let moved = moved.as_standard_layout();
    let b = x.shape()[axis];
    let rest: usize = moved.len() / b;
    let x2 = moved.view().into_shape_with_order((b, rest)).unwrap();
    let y2 = m.dot(&x2);
    let mut out_shape: Vec<usize> = moved.shape().to_vec();
    out_shape[0] = m.nrows();
    let y = y2.into_shape_with_order(IxDyn(&out_shape)).unwrap();
    // perm is its own inverse (a single swap).
    y.permuted_axes(IxDyn(&perm)).as_standard_layout().to_owned()
}
