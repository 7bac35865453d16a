//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! the handles of its inputs. Nodes are only ever appended, so the node order
//! is a topological order and [`Graph::backward`] is a single reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::real::{matmul, matmul_a_bt, matmul_at_b, Real};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    AddBias { x: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: T },
    ScaleBy { x: Var, s: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Mean { x: Var, axes: Vec<usize> },
    AvgPool2 { x: Var },
    Upsample { x: Var, factor: usize },
    Softmax { x: Var, axis: usize },
    Select { x: Var, axis: usize, indices: Vec<usize> },
    Ln { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Reshape { x: Var },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations. Rebuilt for every forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when the loss did not reach it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution, input `N×C×H×W`, kernel `O×C×KH×KW`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                "rank",
                format!("input {xs:?} and kernel {ws:?} must both be 4-D"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride", "stride must be positive"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != ci {
            return Err(Error::dim(
                "conv2d",
                "input axis 1 / kernel axis 1",
                format!("input has {c} channels, kernel expects {ci}"),
            ));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::dim(
                "conv2d",
                "input axes 2,3",
                format!("padded extent {}x{} smaller than kernel {kh}x{kw}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        };
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    /// Adds a per-channel bias `b` (shape `C`) along axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(Error::dim(
                "add_bias",
                "axis 1",
                format!("bias {bs:?} does not match channels of {xs:?}"),
            ));
        }
        let c = xs[1];
        let inner = numel(&xs[2..]);
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bv[(i / inner) % c];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(xs, out)?, Op::AddBias { x, b }, rg))
    }

    /// `x (N×in) · wᵀ (in×out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(
                "linear",
                "input axis 1 / weight axis 1",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::dim(
                "linear",
                "bias axis 0",
                format!("bias {bs:?} vs {} outputs", ws[0]),
            ));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        matmul_a_bt(n, fin, fout, self.value(x).data(), self.value(w).data(), &mut out, false);
        let bv = self.value(b).data();
        for row in out.chunks_mut(fout) {
            for (v, &bb) in row.iter_mut().zip(bv) {
                *v = *v + bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// `max(x, 0)`; NaN propagates so divergence stays visible downstream.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (long, short) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
        if long[long.len() - short.len()..] != *short {
            return Err(Error::dim(
                op,
                "trailing axes",
                format!("{sa:?} and {sb:?} differ beyond leading-axis expansion"),
            ));
        }
        Ok(long.to_vec())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let shape = self.broadcast_shape(op, a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = numel(&shape);
        let out: Vec<T> = (0..n).map(|i| f(av[i % av.len()], bv[i % bv.len()])).collect();
        Ok((Tensor::new(shape, out)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum; the lower-rank operand is repeated over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, rg))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::of_f64(scale), T::of_f64(shift));
        let value = self.value(x).map(|v| s * v + t);
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, scale: s }, rg)
    }

    /// Multiplies `x` by `s`, where `s`'s shape is a prefix of `x`'s shape
    /// (e.g. one weight per row).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s);
        if ss.len() > xs.len() || xs[..ss.len()] != *ss {
            return Err(Error::dim(
                "scale_by",
                "leading axes",
                format!("scale {ss:?} is not a prefix of {xs:?}"),
            ));
        }
        let inner = numel(&xs[ss.len()..]);
        let sv = self.value(s).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / inner])
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(xs, out)?, Op::ScaleBy { x, s }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::dim("concat", "inputs", "nothing to concatenate"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis}"), format!("out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::dim(
                    "concat",
                    format!("all axes except {axis}"),
                    format!("{s:?} vs {first:?}"),
                ));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Mean over `axes` (all axes when empty); reduced axes are dropped.
    /// Accumulates in `f64`.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut axes: Vec<usize> = if axes.is_empty() {
            (0..xs.len()).collect()
        } else {
            axes.to_vec()
        };
        axes.sort_unstable();
        axes.dedup();
        if let Some(&a) = axes.iter().find(|&&a| a >= xs.len()) {
            return Err(Error::dim("mean", format!("axis {a}"), format!("out of range for {xs:?}")));
        }
        let out_shape: Vec<usize> = xs
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let map = ReduceMap::new(&xs, &axes);
        let mut acc = vec![0.0f64; numel(&out_shape)];
        map.for_each(|i, o| acc[o] += self.value(x).data()[i].as_f64());
        let count = map.count as f64;
        let out = acc.into_iter().map(|s| T::of_f64(s / count)).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Mean { x, axes }, rg))
    }

    /// `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::dim("global_avg_pool", "rank", format!("{:?} is not NCHW", self.shape(x))));
        }
        self.mean(x, &[2, 3])
    }

    /// 2×2 average pooling over the last two axes (odd remainders dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[xs.len() - 1] < 2 || xs[xs.len() - 2] < 2 {
            return Err(Error::dim("avg_pool2", "last two axes", format!("{xs:?} too small to pool")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = numel(&xs[..xs.len() - 2]);
        let src = self.value(x).data();
        let quarter = T::of_f64(0.25);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i = base + 2 * y * w + 2 * xx;
                    out.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter);
                }
            }
        }
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool2 { x }, rg))
    }

    /// Nearest-neighbour upsampling of the last two axes by `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || factor == 0 {
            return Err(Error::dim("upsample_nearest", "last two axes", format!("{xs:?} with factor {factor}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = numel(&xs[..xs.len() - 2]);
        let src = self.value(x).data();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                let row = &src[p * h * w + (y / factor) * w..][..w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample { x, factor }, rg))
    }

    /// Numerically stable softmax along `axis` (max-subtracted, `f64` sums).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim("softmax", format!("axis {axis}"), format!("out of range for {xs:?}")));
        }
        let src = self.value(x).data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = split3(&xs, axis);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(src[at(k)].as_f64());
                }
                let mut sum = 0.0;
                for k in 0..len {
                    sum += libm::exp(src[at(k)].as_f64() - max);
                }
                for k in 0..len {
                    out[at(k)] = T::of_f64(libm::exp(src[at(k)].as_f64() - max) / sum);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Gathers `indices` along `axis` (indices may repeat).
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim("select", format!("axis {axis}"), format!("out of range for {xs:?}")));
        }
        if indices.is_empty() {
            return Err(Error::dim("select", format!("axis {axis}"), "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xs[axis]) {
            return Err(Error::dim(
                "select",
                format!("axis {axis}"),
                format!("index {bad} out of range for extent {}", xs[axis]),
            ));
        }
        let (outer, len, inner) = split3(&xs, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let start = (o * len + k) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut shape = xs;
        shape[axis] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Select {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Natural logarithm; the input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::NonFinite { op: "ln" });
        }
        let value = self.value(x).map(|v| v.ln());
        let rg = self.rg(x);
        Ok(self.push(value, Op::Ln { x }, rg))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of_f64(lo), T::of_f64(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::Detached);
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.node_backward(idx, &g);
            self.grads[idx] = Some(g);
            for (v, dg) in contributions {
                if self.rg(v) {
                    accumulate(&mut self.grads[v.0], dg);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    out.push((*x, tensor_like(self.value(*x), dx)));
                }
                if let Some(dw) = dw {
                    out.push((*w, tensor_like(self.value(*w), dw)));
                }
            }
            Op::AddBias { x, b } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let inner = numel(&xs[2..]);
                let mut db = vec![0.0f64; c];
                for (i, &v) in gd.iter().enumerate() {
                    db[(i / inner) % c] += v.as_f64();
                }
                out.push((*x, g.clone()));
                out.push((*b, from_f64_vec(self.value(*b), db)));
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    matmul(n, fout, fin, gd, self.value(*w).data(), &mut dx, false);
                    out.push((*x, tensor_like(self.value(*x), dx)));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    matmul_at_b(fout, n, fin, gd, self.value(*x).data(), &mut dw, false);
                    out.push((*w, tensor_like(self.value(*w), dw)));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f64; fout];
                    for row in gd.chunks(fout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v.as_f64();
                        }
                    }
                    out.push((*b, from_f64_vec(self.value(*b), db)));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((*x, tensor_like(self.value(*x), d)));
            }
            Op::Add { a, b } => {
                out.push((*a, reduce_to(self.value(*a), gd, |gi, _| gi)));
                out.push((*b, reduce_to(self.value(*b), gd, |gi, _| gi)));
            }
            Op::Sub { a, b } => {
                out.push((*a, reduce_to(self.value(*a), gd, |gi, _| gi)));
                out.push((*b, reduce_to(self.value(*b), gd, |gi, _| -gi)));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    out.push((*a, reduce_to(self.value(*a), gd, |gi, i| gi * bv[i % bv.len()])));
                }
                if self.rg(*b) {
                    out.push((*b, reduce_to(self.value(*b), gd, |gi, i| gi * av[i % av.len()])));
                }
            }
            Op::Affine { x, scale } => {
                out.push((*x, g.map(|v| v * *scale)));
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).data();
                let inner = gd.len() / sv.len();
                if self.rg(*x) {
                    let d = gd.iter().enumerate().map(|(i, &v)| v * sv[i / inner]).collect();
                    out.push((*x, tensor_like(self.value(*x), d)));
                }
                if self.rg(*s) {
                    let xv = self.value(*x).data();
                    let mut ds = vec![0.0f64; sv.len()];
                    for (i, (&gi, &xi)) in gd.iter().zip(xv).enumerate() {
                        ds[i / inner] += (gi * xi).as_f64();
                    }
                    out.push((*s, from_f64_vec(self.value(*s), ds)));
                }
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + len]);
                        }
                        out.push((v, tensor_like(self.value(v), d)));
                    }
                    offset += len;
                }
            }
            Op::Mean { x, axes } => {
                let xs = self.shape(*x);
                let map = ReduceMap::new(xs, axes);
                let inv = 1.0 / map.count as f64;
                let mut d = vec![T::zero(); numel(xs)];
                map.for_each(|i, o| d[i] = T::of_f64(gd[o].as_f64() * inv));
                out.push((*x, tensor_like(self.value(*x), d)));
            }
            Op::AvgPool2 { x } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = numel(&xs[..xs.len() - 2]);
                let quarter = T::of_f64(0.25);
                let mut d = vec![T::zero(); numel(xs)];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = gd[(p * oh + y) * ow + xx] * quarter;
                            let i = p * h * w + 2 * y * w + 2 * xx;
                            d[i] = gv;
                            d[i + 1] = gv;
                            d[i + w] = gv;
                            d[i + w + 1] = gv;
                        }
                    }
                }
                out.push((*x, tensor_like(self.value(*x), d)));
            }
            Op::Upsample { x, factor } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let planes = numel(&xs[..xs.len() - 2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut d = vec![0.0f64; numel(xs)];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[p * h * w + (y / factor) * w + xx / factor] += gd[(p * oh + y) * ow + xx].as_f64();
                        }
                    }
                }
                out.push((*x, from_f64_vec(self.value(*x), d)));
            }
            Op::Softmax { x, axis } => {
                let yv = node.value.data();
                let (outer, len, inner) = split3(node.value.shape(), *axis);
                let mut d = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| (gd[at(k)] * yv[at(k)]).as_f64()).sum();
                        for k in 0..len {
                            d[at(k)] = T::of_f64(yv[at(k)].as_f64() * (gd[at(k)].as_f64() - dot));
                        }
                    }
                }
                out.push((*x, tensor_like(self.value(*x), d)));
            }
            Op::Select { x, axis, indices } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = split3(xs, *axis);
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    for (j, &k) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner;
                        let dst = (o * len + k) * inner;
                        for t in 0..inner {
                            d[dst + t] = d[dst + t] + gd[src + t];
                        }
                    }
                }
                out.push((*x, tensor_like(self.value(*x), d)));
            }
            Op::Ln { x } => {
                let xv = self.value(*x).data();
                let d = xv.iter().zip(gd).map(|(&xi, &gi)| gi / xi).collect();
                out.push((*x, tensor_like(self.value(*x), d)));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(&xi, &gi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                    .collect();
                out.push((*x, tensor_like(self.value(*x), d)));
            }
            Op::Reshape { x } => {
                out.push((*x, tensor_like(self.value(*x), gd.to_vec())));
            }
        }
        out
    }
}

fn tensor_like<T: Real>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape matches its input")
}

fn from_f64_vec<T: Real>(like: &Tensor<T>, data: Vec<f64>) -> Tensor<T> {
    tensor_like(like, data.into_iter().map(T::of_f64).collect())
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
}

/// Sums a broadcast gradient back down to `like`'s (suffix) shape.
fn reduce_to<T: Real>(like: &Tensor<T>, gd: &[T], f: impl Fn(T, usize) -> T) -> Tensor<T> {
    let n = like.numel();
    if n == gd.len() {
        return tensor_like(like, gd.iter().enumerate().map(|(i, &v)| f(v, i)).collect());
    }
    let mut acc = vec![0.0f64; n];
    for (i, &v) in gd.iter().enumerate() {
        acc[i % n] += f(v, i).as_f64();
    }
    from_f64_vec(like, acc)
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Maps each input flat index to its output flat index for an axis reduction.
struct ReduceMap {
    shape: Vec<usize>,
    out_strides: Vec<usize>,
    count: usize,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let mut out_strides = vec![0; shape.len()];
        let mut stride = 1;
        for i in (0..shape.len()).rev() {
            if !axes.contains(&i) {
                out_strides[i] = stride;
                stride *= shape[i];
            }
        }
        let count = axes.iter().map(|&a| shape[a]).product();
        Self {
            shape: shape.to_vec(),
            out_strides,
            count,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total = numel(&self.shape);
        let rank = self.shape.len();
        let mut idx = vec![0usize; rank];
        let mut out = 0usize;
        for i in 0..total {
            f(i, out);
            for d in (0..rank).rev() {
                idx[d] += 1;
                out += self.out_strides[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                out -= self.out_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

// ------------------------------------------------------------ convolution

fn im2col<T: Real>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let l = g.col_cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let l = g.col_cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (k, l) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * l;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
    for n in 0..g.n {
        let img = &x[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        if g.is_pointwise() {
            matmul(g.o, k, l, w, img, dst, false);
        } else {
            im2col(g, img, &mut col);
            matmul(g.o, k, l, w, &col, dst, false);
        }
    }
    out
}

fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, l) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * l;
    let mut dx = want_dx.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.o * k]);
    let mut col = vec![T::zero(); k * l];
    for n in 0..g.n {
        let gyn = &gy[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let img = &x[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                matmul_a_bt(g.o, l, k, gyn, img, dw, n > 0);
            } else {
                im2col(g, img, &mut col);
                matmul_a_bt(g.o, l, k, gyn, &col, dw, n > 0);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                matmul_at_b(k, g.o, l, w, gyn, dst, false);
            } else {
                matmul_at_b(k, g.o, l, w, gyn, &mut col, false);
                col2im(g, &col, dst);
            }
        }
    }
    (dx, dw)
}
