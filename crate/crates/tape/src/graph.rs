use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::kernels::{
    col2im3x3, composite_ray, composite_ray_backward, im2col3x3, order_invariant_sum,
    space_to_depth,
};
use crate::scalar::gemm;
use crate::{Scalar, SparseMap, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Unary<T> {
    Silu,
    Sigmoid,
    Softplus,
    LeakyRelu(T),
    Ln,
    Exp,
    Sqr,
    Tanh,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    AddBroadcast(Var, Var),
    Linear(Var, Var),
    Conv3x3 { x: Var, w: Var, cols: Vec<T> },
    SpaceToDepth(Var),
    DepthToSpace(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    Unary(Var, Unary<T>),
    Clamp(Var, T, T),
    GroupMean(Var, usize),
    RepeatGroups(Var, usize),
    MeanMiddle(Var),
    ViewsToChannels(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Sparse(Var, Arc<SparseMap<T>>),
    Composite { samples: Var, deltas: Arc<Vec<T>>, background: [T; 3] },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A recording of tensor operations that can be differentiated in reverse.
///
/// Every operation is evaluated eagerly; `backward` walks the tape from a
/// scalar output back to the leaves.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn tail_rows(shape: &[usize]) -> (usize, usize) {
    let c = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (n / c.max(1), c)
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected an NHWC tensor, got shape {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Copies `v` into a new leaf that blocks gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn unary_map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        self.value(a).map(f)
    }

    fn binary_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        va.zip_map(&vb, f)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary_map(a, b, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary_map(a, b, |x, y| x - y);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary_map(a, b, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let v = self.unary_map(a, |x| x * s);
        let rg = self.needs(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `s * a + b` for constants `s` and `b`.
    pub fn affine(&self, a: Var, s: T, b: T) -> Var {
        let v = self.unary_map(a, |x| x * s + b);
        let rg = self.needs(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds a vector along the trailing dimension.
    pub fn add_bias(&self, x: Var, bias: Var) -> Var {
        let v = {
            let vx = self.value(x);
            let vb = self.value(bias);
            let c = vx.last_dim();
            assert_eq!(vb.numel(), c, "bias length mismatch");
            let mut out = vx.clone();
            for row in out.data_mut().chunks_exact_mut(c) {
                for (o, &b) in row.iter_mut().zip(vb.data()) {
                    *o = *o + b;
                }
            }
            out
        };
        let rg = self.needs(&[x, bias]);
        self.push(v, Op::AddBias(x, bias), rg)
    }

    /// `x` of shape `(g, ..., c)` plus `e` of shape `(g, c)`, broadcast over
    /// the middle dimensions.
    pub fn add_broadcast(&self, x: Var, e: Var) -> Var {
        let v = {
            let vx = self.value(x);
            let ve = self.value(e);
            let g = vx.shape()[0];
            let c = vx.last_dim();
            assert_eq!(ve.shape(), &[g, c], "broadcast operand must be (groups, channels)");
            let per = vx.numel() / g;
            let mut out = vx.clone();
            for (gi, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
                let ev = &ve.data()[gi * c..(gi + 1) * c];
                for row in chunk.chunks_exact_mut(c) {
                    for (o, &b) in row.iter_mut().zip(ev) {
                        *o = *o + b;
                    }
                }
            }
            out
        };
        let rg = self.needs(&[x, e]);
        self.push(v, Op::AddBroadcast(x, e), rg)
    }

    /// Matrix product over the trailing dimension: `(..., k) @ (k, n)`.
    pub fn linear(&self, x: Var, w: Var) -> Var {
        let v = {
            let vx = self.value(x);
            let vw = self.value(w);
            assert_eq!(vw.shape().len(), 2, "weight must be 2-D");
            let (k, n) = (vw.shape()[0], vw.shape()[1]);
            let (m, kx) = tail_rows(vx.shape());
            assert_eq!(kx, k, "linear: input dim {kx} vs weight rows {k}");
            let mut out = vec![T::zero(); m * n];
            gemm(m, k, n, vx.data(), false, vw.data(), false, T::zero(), &mut out);
            let mut shape = vx.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, out)
        };
        let rg = self.needs(&[x, w]);
        self.push(v, Op::Linear(x, w), rg)
    }

    /// Same-padded 3x3 convolution, NHWC input, weight `(9 * c_in, c_out)`.
    pub fn conv3x3(&self, x: Var, w: Var) -> Var {
        let (v, cols) = {
            let vx = self.value(x);
            let vw = self.value(w);
            let (b, h, wd, c) = dims4(vx.shape());
            assert_eq!(vw.shape()[0], 9 * c, "conv3x3 weight rows must be 9 * c_in");
            let n = vw.shape()[1];
            let cols = im2col3x3(vx.data(), b, h, wd, c);
            let mut out = vec![T::zero(); b * h * wd * n];
            gemm(b * h * wd, 9 * c, n, &cols, false, vw.data(), false, T::zero(), &mut out);
            (Tensor::new(vec![b, h, wd, n], out), cols)
        };
        let rg = self.needs(&[x, w]);
        let cols = if rg { cols } else { Vec::new() };
        self.push(v, Op::Conv3x3 { x, w, cols }, rg)
    }

    pub fn space_to_depth(&self, x: Var) -> Var {
        let v = {
            let vx = self.value(x);
            let (b, h, w, c) = dims4(vx.shape());
            assert!(h % 2 == 0 && w % 2 == 0, "space_to_depth needs even spatial dims");
            Tensor::new(vec![b, h / 2, w / 2, 4 * c], space_to_depth(vx.data(), b, h, w, c, false))
        };
        let rg = self.needs(&[x]);
        self.push(v, Op::SpaceToDepth(x), rg)
    }

    pub fn depth_to_space(&self, x: Var) -> Var {
        let v = {
            let vx = self.value(x);
            let (b, h, w, c4) = dims4(vx.shape());
            assert!(c4 % 4 == 0, "depth_to_space needs channels divisible by 4");
            let c = c4 / 4;
            Tensor::new(
                vec![b, 2 * h, 2 * w, c],
                space_to_depth(vx.data(), b, 2 * h, 2 * w, c, true),
            )
        };
        let rg = self.needs(&[x]);
        self.push(v, Op::DepthToSpace(x), rg)
    }

    /// Concatenation along the trailing dimension.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let v = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let lead = vals[0].shape()[..vals[0].shape().len() - 1].to_vec();
            let rows: usize = lead.iter().product();
            let widths: Vec<usize> = vals.iter().map(|t| t.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let mut out = vec![T::zero(); rows * total];
            let mut off = 0;
            for (t, &wdt) in vals.iter().zip(&widths) {
                assert_eq!(&t.shape()[..t.shape().len() - 1], &lead[..], "concat shape mismatch");
                for r in 0..rows {
                    out[r * total + off..r * total + off + wdt]
                        .copy_from_slice(&t.data()[r * wdt..(r + 1) * wdt]);
                }
                off += wdt;
            }
            let mut shape = lead;
            shape.push(total);
            Tensor::new(shape, out)
        };
        let rg = self.needs(parts);
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let v = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_rows(&refs)
        };
        let rg = self.needs(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        let rg = self.needs(&[x]);
        self.push(v, Op::SliceRows(x, start), rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape.to_vec());
        let rg = self.needs(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn unary(&self, x: Var, kind: Unary<T>) -> Var {
        let one = T::one();
        let v = match kind {
            Unary::Silu => self.unary_map(x, |a| a / (one + (-a).exp())),
            Unary::Sigmoid => self.unary_map(x, |a| one / (one + (-a).exp())),
            Unary::Softplus => {
                self.unary_map(x, |a| a.max(T::zero()) + (-a.abs()).exp().ln_1p())
            }
            Unary::LeakyRelu(s) => self.unary_map(x, |a| if a > T::zero() { a } else { a * s }),
            Unary::Ln => self.unary_map(x, |a| a.ln()),
            Unary::Exp => self.unary_map(x, |a| a.exp()),
            Unary::Sqr => self.unary_map(x, |a| a * a),
            Unary::Tanh => self.unary_map(x, |a| a.tanh()),
        };
        let rg = self.needs(&[x]);
        self.push(v, Op::Unary(x, kind), rg)
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn sqr(&self, x: Var) -> Var {
        self.unary(x, Unary::Sqr)
    }

    /// Clamps to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Var {
        let v = self.unary_map(x, |a| a.max(lo).min(hi));
        let rg = self.needs(&[x]);
        self.push(v, Op::Clamp(x, lo, hi), rg)
    }

    /// Mean over consecutive groups of `n` rows: `(g * n, ...) -> (g, ...)`.
    ///
    /// The summation order is canonicalized, so permuting rows within a
    /// group leaves the result bit-identical.
    pub fn group_mean(&self, x: Var, n: usize) -> Var {
        let v = {
            let vx = self.value(x);
            let rows = vx.shape()[0];
            assert!(n > 0 && rows % n == 0, "group_mean: {rows} rows not divisible by {n}");
            let g = rows / n;
            let per = vx.numel() / rows;
            let inv = T::one() / T::of(n as f64);
            let mut out = vec![T::zero(); g * per];
            let mut buf = vec![T::zero(); n];
            for gi in 0..g {
                for e in 0..per {
                    for (j, slot) in buf.iter_mut().enumerate() {
                        *slot = vx.data()[(gi * n + j) * per + e];
                    }
                    out[gi * per + e] = order_invariant_sum(&mut buf) * inv;
                }
            }
            let mut shape = vx.shape().to_vec();
            shape[0] = g;
            Tensor::new(shape, out)
        };
        let rg = self.needs(&[x]);
        self.push(v, Op::GroupMean(x, n), rg)
    }

    /// Repeats each row `n` times consecutively: `(g, ...) -> (g * n, ...)`.
    pub fn repeat_groups(&self, x: Var, n: usize) -> Var {
        let v = {
            let vx = self.value(x);
            let g = vx.shape()[0];
            let per = vx.numel() / g.max(1);
            let mut out = Vec::with_capacity(vx.numel() * n);
            for gi in 0..g {
                for _ in 0..n {
                    out.extend_from_slice(&vx.data()[gi * per..(gi + 1) * per]);
                }
            }
            let mut shape = vx.shape().to_vec();
            shape[0] = g * n;
            Tensor::new(shape, out)
        };
        let rg = self.needs(&[x]);
        self.push(v, Op::RepeatGroups(x, n), rg)
    }

    /// Mean over all middle dimensions: `(g, ..., c) -> (g, c)`.
    pub fn mean_middle(&self, x: Var) -> Var {
        let v = {
            let vx = self.value(x);
            let g = vx.shape()[0];
            let c = vx.last_dim();
            let per = vx.numel() / g / c;
            let inv = T::one() / T::of(per as f64);
            let mut out = vec![T::zero(); g * c];
            for gi in 0..g {
                for p in 0..per {
                    let row = &vx.data()[(gi * per + p) * c..(gi * per + p + 1) * c];
                    for (o, &r) in out[gi * c..(gi + 1) * c].iter_mut().zip(row) {
                        *o = *o + r;
                    }
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
            Tensor::new(vec![g, c], out)
        };
        let rg = self.needs(&[x]);
        self.push(v, Op::MeanMiddle(x), rg)
    }

    /// `(g * n, h, w, c) -> (g, h, w, n * c)`: stacks the `n` views of each
    /// group along channels, view-major.
    pub fn views_to_channels(&self, x: Var, n: usize) -> Var {
        let v = {
            let vx = self.value(x);
            let (rows, h, w, c) = dims4(vx.shape());
            assert!(rows % n == 0, "views_to_channels: rows not divisible by view count");
            let g = rows / n;
            let mut out = vec![T::zero(); vx.numel()];
            for gi in 0..g {
                for v in 0..n {
                    for p in 0..h * w {
                        let src = ((gi * n + v) * h * w + p) * c;
                        let dst = (gi * h * w + p) * n * c + v * c;
                        out[dst..dst + c].copy_from_slice(&vx.data()[src..src + c]);
                    }
                }
            }
            Tensor::new(vec![g, h, w, n * c], out)
        };
        let rg = self.needs(&[x]);
        self.push(v, Op::ViewsToChannels(x, n), rg)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.needs(&[x]);
        self.push(v, Op::MeanAll(x), rg)
    }

    /// Applies a fixed sparse map to rows of `x` (trailing dimension kept).
    pub fn sparse(&self, x: Var, map: &Arc<SparseMap<T>>) -> Var {
        let v = map.apply(&self.value(x));
        let rg = self.needs(&[x]);
        self.push(v, Op::Sparse(x, Arc::clone(map)), rg)
    }

    /// Emission-absorption compositing of `(rays, samples, 4)` inputs holding
    /// `[sigma, r, g, b]`; returns `(rays, 3)`.
    pub fn composite(&self, samples: Var, deltas: &Arc<Vec<T>>, background: [T; 3]) -> Var {
        let v = {
            let vs = self.value(samples);
            let s = deltas.len();
            assert_eq!(vs.last_dim(), 4, "composite expects [sigma, r, g, b] samples");
            let rays = vs.numel() / (4 * s);
            assert_eq!(rays * 4 * s, vs.numel(), "composite: sample count mismatch");
            let mut out = Vec::with_capacity(rays * 3);
            for ray in vs.data().chunks_exact(4 * s) {
                out.extend_from_slice(&composite_ray(ray, deltas, None, background).rgb);
            }
            Tensor::new(vec![rays, 3], out)
        };
        let rg = self.needs(&[samples]);
        self.push(v, Op::Composite { samples, deltas: Arc::clone(deltas), background }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            let mut acc = |v: Var, g: Tensor<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*b, gy.clone());
                    acc(*a, gy);
                }
                Op::Sub(a, b) => {
                    acc(*b, gy.map(|g| -g));
                    acc(*a, gy);
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        acc(*a, gy.zip_map(val(*b), |g, y| g * y));
                    }
                    if rg(*b) {
                        acc(*b, gy.zip_map(val(*a), |g, x| g * x));
                    }
                }
                Op::Scale(a, s) => acc(*a, gy.map(|g| g * *s)),
                Op::AddBias(x, b) => {
                    if rg(*b) {
                        let c = gy.last_dim();
                        let mut gb = vec![T::zero(); c];
                        for row in gy.data().chunks_exact(c) {
                            for (o, &g) in gb.iter_mut().zip(row) {
                                *o = *o + g;
                            }
                        }
                        acc(*b, Tensor::new(val(*b).shape().to_vec(), gb));
                    }
                    acc(*x, gy);
                }
                Op::AddBroadcast(x, e) => {
                    if rg(*e) {
                        let g = gy.shape()[0];
                        let c = gy.last_dim();
                        let per = gy.numel() / g;
                        let mut ge = vec![T::zero(); g * c];
                        for (gi, chunk) in gy.data().chunks_exact(per).enumerate() {
                            for row in chunk.chunks_exact(c) {
                                for (o, &v) in ge[gi * c..(gi + 1) * c].iter_mut().zip(row) {
                                    *o = *o + v;
                                }
                            }
                        }
                        acc(*e, Tensor::new(vec![g, c], ge));
                    }
                    acc(*x, gy);
                }
                Op::Linear(x, w) => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (k, n) = (vw.shape()[0], vw.shape()[1]);
                    let (m, _) = tail_rows(vx.shape());
                    if rg(*w) {
                        let mut gw = vec![T::zero(); k * n];
                        gemm(k, m, n, vx.data(), true, gy.data(), false, T::zero(), &mut gw);
                        acc(*w, Tensor::new(vec![k, n], gw));
                    }
                    if rg(*x) {
                        let mut gx = vec![T::zero(); m * k];
                        gemm(m, n, k, gy.data(), false, vw.data(), true, T::zero(), &mut gx);
                        acc(*x, Tensor::new(vx.shape().to_vec(), gx));
                    }
                }
                Op::Conv3x3 { x, w, cols } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (b, h, wd, c) = dims4(vx.shape());
                    let n = vw.shape()[1];
                    let m = b * h * wd;
                    if rg(*w) {
                        let mut gw = vec![T::zero(); 9 * c * n];
                        gemm(9 * c, m, n, cols, true, gy.data(), false, T::zero(), &mut gw);
                        acc(*w, Tensor::new(vec![9 * c, n], gw));
                    }
                    if rg(*x) {
                        let mut gcols = vec![T::zero(); m * 9 * c];
                        gemm(m, n, 9 * c, gy.data(), false, vw.data(), true, T::zero(), &mut gcols);
                        let gx = col2im3x3(&gcols, b, h, wd, c);
                        acc(*x, Tensor::new(vec![b, h, wd, c], gx));
                    }
                }
                Op::SpaceToDepth(x) => {
                    let (b, h, w, c) = dims4(val(*x).shape());
                    acc(*x, Tensor::new(vec![b, h, w, c], space_to_depth(gy.data(), b, h, w, c, true)));
                }
                Op::DepthToSpace(x) => {
                    let (b, h, w, c4) = dims4(val(*x).shape());
                    let gx = space_to_depth(gy.data(), b, 2 * h, 2 * w, c4 / 4, false);
                    acc(*x, Tensor::new(vec![b, h, w, c4], gx));
                }
                Op::Concat(parts) => {
                    let total = gy.last_dim();
                    let rows = gy.numel() / total;
                    let mut off = 0;
                    for &p in parts {
                        let wdt = val(p).last_dim();
                        if rg(p) {
                            let mut gp = Vec::with_capacity(rows * wdt);
                            for r in 0..rows {
                                gp.extend_from_slice(
                                    &gy.data()[r * total + off..r * total + off + wdt],
                                );
                            }
                            acc(p, Tensor::new(val(p).shape().to_vec(), gp));
                        }
                        off += wdt;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).shape()[0];
                        if rg(p) {
                            acc(p, gy.slice_rows(start, rows));
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(x, start) => {
                    let vx = val(*x);
                    let per: usize = vx.shape()[1..].iter().product();
                    let mut gx = vec![T::zero(); vx.numel()];
                    gx[start * per..start * per + gy.numel()].copy_from_slice(gy.data());
                    acc(*x, Tensor::new(vx.shape().to_vec(), gx));
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, gy.reshape(shape));
                }
                Op::Unary(x, kind) => {
                    let vx = val(*x);
                    let vy = &node.value;
                    let one = T::one();
                    let g = match kind {
                        Unary::Silu => {
                            let d = vx.map(|a| {
                                let s = one / (one + (-a).exp());
                                s * (one + a * (one - s))
                            });
                            gy.zip_map(&d, |g, d| g * d)
                        }
                        Unary::Sigmoid => gy.zip_map(vy, |g, y| g * y * (one - y)),
                        Unary::Softplus => {
                            gy.zip_map(vx, |g, a| g / (one + (-a).exp()))
                        }
                        Unary::LeakyRelu(s) => {
                            gy.zip_map(vx, |g, a| if a > T::zero() { g } else { g * *s })
                        }
                        Unary::Ln => gy.zip_map(vx, |g, a| g / a),
                        Unary::Exp => gy.zip_map(vy, |g, y| g * y),
                        Unary::Sqr => gy.zip_map(vx, |g, a| g * (a + a)),
                        Unary::Tanh => gy.zip_map(vy, |g, y| g * (one - y * y)),
                    };
                    acc(*x, g);
                }
                Op::Clamp(x, lo, hi) => {
                    let g = gy.zip_map(val(*x), |g, a| {
                        if a >= *lo && a <= *hi {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    acc(*x, g);
                }
                Op::GroupMean(x, n) => {
                    let vx = val(*x);
                    let rows = vx.shape()[0];
                    let per = vx.numel() / rows;
                    let inv = T::one() / T::of(*n as f64);
                    let mut gx = vec![T::zero(); vx.numel()];
                    for r in 0..rows {
                        let gi = r / n;
                        for e in 0..per {
                            gx[r * per + e] = gy.data()[gi * per + e] * inv;
                        }
                    }
                    acc(*x, Tensor::new(vx.shape().to_vec(), gx));
                }
                Op::RepeatGroups(x, n) => {
                    let vx = val(*x);
                    let g = vx.shape()[0];
                    let per = vx.numel() / g.max(1);
                    let mut gx = vec![T::zero(); vx.numel()];
                    for gi in 0..g {
                        for j in 0..*n {
                            let src = &gy.data()[(gi * n + j) * per..(gi * n + j + 1) * per];
                            for (o, &s) in gx[gi * per..(gi + 1) * per].iter_mut().zip(src) {
                                *o = *o + s;
                            }
                        }
                    }
                    acc(*x, Tensor::new(vx.shape().to_vec(), gx));
                }
                Op::MeanMiddle(x) => {
                    let vx = val(*x);
                    let g = vx.shape()[0];
                    let c = vx.last_dim();
                    let per = vx.numel() / g / c;
                    let inv = T::one() / T::of(per as f64);
                    let mut gx = vec![T::zero(); vx.numel()];
                    for gi in 0..g {
                        let src = &gy.data()[gi * c..(gi + 1) * c];
                        for p in 0..per {
                            for (o, &s) in
                                gx[(gi * per + p) * c..(gi * per + p + 1) * c].iter_mut().zip(src)
                            {
                                *o = s * inv;
                            }
                        }
                    }
                    acc(*x, Tensor::new(vx.shape().to_vec(), gx));
                }
                Op::ViewsToChannels(x, n) => {
                    let vx = val(*x);
                    let (rows, h, w, c) = dims4(vx.shape());
                    let g = rows / n;
                    let mut gx = vec![T::zero(); vx.numel()];
                    for gi in 0..g {
                        for v in 0..*n {
                            for p in 0..h * w {
                                let dst = ((gi * n + v) * h * w + p) * c;
                                let src = (gi * h * w + p) * n * c + v * c;
                                gx[dst..dst + c].copy_from_slice(&gy.data()[src..src + c]);
                            }
                        }
                    }
                    acc(*x, Tensor::new(vx.shape().to_vec(), gx));
                }
                Op::SumAll(x) => {
                    let g = gy.item();
                    acc(*x, Tensor::full(val(*x).shape().to_vec(), g));
                }
                Op::MeanAll(x) => {
                    let n = val(*x).numel();
                    let g = gy.item() / T::of(n.max(1) as f64);
                    acc(*x, Tensor::full(val(*x).shape().to_vec(), g));
                }
                Op::Sparse(x, map) => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, map.apply_transpose(&gy, &shape));
                }
                Op::Composite { samples, deltas, background } => {
                    let vs = val(*samples);
                    let s = deltas.len();
                    let mut gs = vec![T::zero(); vs.numel()];
                    let mut scratch = Vec::with_capacity(s);
                    for (r, ray) in vs.data().chunks_exact(4 * s).enumerate() {
                        let g = [gy.data()[3 * r], gy.data()[3 * r + 1], gy.data()[3 * r + 2]];
                        composite_ray_backward(
                            ray,
                            deltas,
                            *background,
                            g,
                            &mut gs[r * 4 * s..(r + 1) * 4 * s],
                            &mut scratch,
                        );
                    }
                    acc(*samples, Tensor::new(vs.shape().to_vec(), gs));
                }
            }
        }
        Grads { grads }
    }
}
