//! Reverse-mode autodiff over NCHW tensors.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Nodes that cannot reach a gradient-requiring
//! leaf are never differentiated, so frozen parameters cost only their
//! forward pass.

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Vec<Var>),
    Channel { x: Var, index: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    SumPerSample(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(Error::Shape(msg))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Stride-1 convolution with symmetric zero padding.
    ///
    /// `w` is `[C_out, C_in, K, K]`, `b` is `[1, C_out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, kh, kw] = self.shape(w);
        if wcin != cin || kh != kw {
            return shape_err(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        if self.shape(b) != [1, cout, 1, 1] {
            return shape_err(format!("conv bias {:?} for {cout} outputs", self.shape(b)));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("kernel {kh} larger than padded input {h}x{wd}"));
        }
        let (ho, wo) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let kk = cin * kh * kw;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        let mut cols = vec![T::zero(); if kh == 1 && pad == 0 { 0 } else { kk * ho * wo }];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let per_out = cout * ho * wo;
            for s in 0..n {
                let xs = xv.sample(s);
                let col: &[T] = if kh == 1 && pad == 0 {
                    xs
                } else {
                    im2col(xs, cin, h, wd, kh, pad, &mut cols);
                    &cols
                };
                let os = &mut out.data_mut()[s * per_out..(s + 1) * per_out];
                for (c, plane) in os.chunks_mut(ho * wo).enumerate() {
                    plane.fill(bv[c]);
                }
                matmul(cout, kk, ho * wo, wv, false, col, false, os, true);
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.push(out, Op::Relu(x), &[x])
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2 needs even sides, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::from_vec([n, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let out = Tensor::from_vec([n, c, ho, wo], out).expect("upsample shape");
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.shape(*first);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != n || s[2] != h || s[3] != w {
                return shape_err(format!(
                    "concat {:?} with {:?}",
                    s,
                    self.shape(*first)
                ));
            }
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for s in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).sample(s));
            }
        }
        let out = Tensor::from_vec([n, total_c, h, w], out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Single channel `index` of `x`, keeping a channel axis of size 1.
    pub fn channel(&mut self, x: Var, index: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if index >= c {
            return shape_err(format!("channel {index} of a {c}-channel tensor"));
        }
        let mut out = Vec::with_capacity(n * h * w);
        for s in 0..n {
            out.extend_from_slice(self.value(x).plane(s, index));
        }
        let out = Tensor::from_vec([n, 1, h, w], out)?;
        Ok(self.push(out, Op::Channel { x, index }, &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "element-wise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(src.shape(), data).expect("unary shape");
        self.push(out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::Offset(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Per-sample sum, `[N, C, H, W] -> [N, 1, 1, 1]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let n = self.shape(x)[0];
        let src = self.value(x);
        let data = (0..n).map(|s| src.sample(s).iter().copied().sum()).collect();
        let out = Tensor::from_vec([n, 1, 1, 1], data).expect("sum shape");
        self.push(out, Op::SumPerSample(x), &[x])
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let total: T = src.data().iter().copied().sum();
        let mean = total / T::of(src.numel() as f64);
        self.push(Tensor::scalar(mean), Op::Mean(x), &[x])
    }

    /// Gradients of the single-element `loss` with respect to every node
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce(&mut Tensor<T>),
    ) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("slot initialized"));
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, g, grads),
            Op::Relu(x) => {
                let out = node.value.data();
                self.accumulate_with(grads, *x, |t| {
                    for ((d, &o), &gv) in t.data_mut().iter_mut().zip(out).zip(gd) {
                        if o > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate_with(grads, *x, |t| {
                    let td = t.data_mut();
                    for (&idx, &gv) in argmax.iter().zip(gd) {
                        td[idx as usize] += gv;
                    }
                });
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.shape(*x);
                let wo = 2 * w;
                self.accumulate_with(grads, *x, |t| {
                    let td = t.data_mut();
                    for plane in 0..n * c {
                        let src = &gd[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut td[plane * h * w..(plane + 1) * h * w];
                        for (oy, row) in src.chunks(wo).enumerate() {
                            let drow = &mut dst[(oy / 2) * w..(oy / 2 + 1) * w];
                            for (ox, &gv) in row.iter().enumerate() {
                                drow[ox / 2] += gv;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let n = g.batch();
                let mut offsets = Vec::with_capacity(parts.len());
                let mut acc = 0;
                for &p in parts {
                    offsets.push(acc);
                    acc += self.value(p).sample(0).len();
                }
                for (&p, &off) in parts.iter().zip(&offsets) {
                    let len = self.value(p).sample(0).len();
                    self.accumulate_with(grads, p, |t| {
                        let td = t.data_mut();
                        for s in 0..n {
                            let src = &g.sample(s)[off..off + len];
                            for (d, &gv) in td[s * len..(s + 1) * len].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Channel { x, index } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                self.accumulate_with(grads, *x, |t| {
                    let td = t.data_mut();
                    for s in 0..n {
                        let dst = &mut td[(s * c + index) * hw..(s * c + index + 1) * hw];
                        for (d, &gv) in dst.iter_mut().zip(&gd[s * hw..(s + 1) * hw]) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                self.accumulate_with(grads, *b, |t| {
                    for (d, &gv) in t.data_mut().iter_mut().zip(gd) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |t| {
                    for ((d, &gv), &y) in t.data_mut().iter_mut().zip(gd).zip(bv) {
                        *d += gv * y;
                    }
                });
                self.accumulate_with(grads, *b, |t| {
                    for ((d, &gv), &x) in t.data_mut().iter_mut().zip(gd).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate_with(grads, *x, |t| {
                    for (d, &gv) in t.data_mut().iter_mut().zip(gd) {
                        *d += gv * s;
                    }
                });
            }
            Op::Offset(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                self.accumulate_with(grads, *x, |t| {
                    for ((d, &gv), &y) in t.data_mut().iter_mut().zip(gd).zip(out) {
                        *d += gv * y * (T::one() - y);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate_with(grads, *x, |t| {
                    for ((d, &gv), &v) in t.data_mut().iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        } else if v < T::zero() {
                            *d -= gv;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = T::of(2.0);
                self.accumulate_with(grads, *x, |t| {
                    for ((d, &gv), &v) in t.data_mut().iter_mut().zip(gd).zip(xv) {
                        *d += two * v * gv;
                    }
                });
            }
            Op::SumPerSample(x) => {
                let per = self.value(*x).sample(0).len();
                self.accumulate_with(grads, *x, |t| {
                    for (chunk, &gv) in t.data_mut().chunks_mut(per).zip(gd) {
                        for d in chunk {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.accumulate_with(grads, *x, |t| {
                    for d in t.data_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Mean(x) => {
                let gv = gd[0] / T::of(self.value(*x).numel() as f64);
                self.accumulate_with(grads, *x, |t| {
                    for d in t.data_mut() {
                        *d += gv;
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [cout, _, k, _] = wv.shape();
        let (ho, wo) = (g.height(), g.width());
        let kk = cin * k * k;
        let direct = k == 1 && pad == 0;
        let per_out = cout * ho * wo;

        if self.wants(b) {
            self.accumulate_with(grads, b, |t| {
                let bd = t.data_mut();
                for s in 0..n {
                    for (c, plane) in g.data()[s * per_out..(s + 1) * per_out]
                        .chunks(ho * wo)
                        .enumerate()
                    {
                        bd[c] += plane.iter().copied().sum();
                    }
                }
            });
        }
        if self.wants(w) {
            let mut cols = vec![T::zero(); if direct { 0 } else { kk * ho * wo }];
            self.accumulate_with(grads, w, |t| {
                for s in 0..n {
                    let xs = xv.sample(s);
                    let col: &[T] = if direct {
                        xs
                    } else {
                        im2col(xs, cin, h, wd, k, pad, &mut cols);
                        &cols
                    };
                    let gs = &g.data()[s * per_out..(s + 1) * per_out];
                    matmul(cout, ho * wo, kk, gs, false, col, true, t.data_mut(), true);
                }
            });
        }
        if self.wants(x) {
            let mut dcols = vec![T::zero(); kk * ho * wo];
            let per_in = cin * h * wd;
            self.accumulate_with(grads, x, |t| {
                for s in 0..n {
                    let gs = &g.data()[s * per_out..(s + 1) * per_out];
                    let dx = &mut t.data_mut()[s * per_in..(s + 1) * per_in];
                    if direct {
                        matmul(kk, cout, ho * wo, wv.data(), true, gs, false, dx, true);
                    } else {
                        matmul(kk, cout, ho * wo, wv.data(), true, gs, false, &mut dcols, false);
                        col2im(&dcols, cin, h, wd, k, pad, dx);
                    }
                }
            });
        }
    }
}

/// Unfolds a `[C, H, W]` sample into `[C*K*K, Ho*Wo]` patch columns.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_span(wo, w, kx, pad);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let start = lo + kx - pad;
                    drow[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Folds patch-column gradients back onto a `[C, H, W]` sample.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [T]) {
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_span(wo, w, kx, pad);
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h || lo >= hi {
                        continue;
                    }
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    let start = (iy - pad) * w + lo + kx - pad;
                    for (d, &v) in plane[start..start + (hi - lo)].iter_mut().zip(srow) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kx - pad` is in range.
fn valid_span(wo: usize, w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check_grad(
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
        input: Tensor<f64>,
        probes: &[usize],
    ) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let eps = 1e-6;
        for &i in probes {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(t, false);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!((fd - a).abs() / denom < 1e-5, "probe {i}: fd {fd} vs autodiff {a}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = random_tensor([2, 3, 5, 6], 1);
        let w = random_tensor([4, 3, 3, 3], 2);
        let b = random_tensor([1, 4, 1, 1], 3);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 1).unwrap();
        let out = g.value(y);
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..5 {
                    for ox in 0..6 {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[((n * 3 + ci) * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                        let got = out.data()[((n * 4 + co) * 5 + oy) * 6 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let w = random_tensor([3, 2, 3, 3], 5);
        let b = random_tensor([1, 3, 1, 1], 6);
        let target = random_tensor([2, 3, 4, 6], 7);
        let build = |g: &mut Graph<f64>, x: Var| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(x, wv, bv, 1).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(y, t).unwrap();
            let s = g.square(d);
            g.mean(s)
        };
        check_grad(build, random_tensor([2, 2, 4, 6], 8), &[0, 7, 13, 29, 47, 95]);

        // weight gradient: treat the weight as the probed leaf
        let x = random_tensor([2, 2, 4, 6], 9);
        let build_w = |g: &mut Graph<f64>, wv: Var| {
            let xv = g.constant(x.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(xv, wv, bv, 1).unwrap();
            let s = g.square(y);
            g.sum(s)
        };
        check_grad(build_w, w.clone(), &[0, 5, 17, 31, 53]);
    }

    #[test]
    fn pooling_upsampling_concat_gradients() {
        let build = |g: &mut Graph<f64>, x: Var| {
            let p = g.max_pool2(x).unwrap();
            let u = g.upsample2(p);
            let c = g.concat(&[u, x]).unwrap();
            let ch = g.channel(c, 3).unwrap();
            let s = g.sigmoid(ch);
            let a = g.abs(s);
            let sq = g.square(a);
            let ps = g.sum_per_sample(sq);
            g.mean(ps)
        };
        check_grad(build, random_tensor([2, 2, 4, 4], 11), &[0, 3, 9, 17, 22, 40, 63]);
    }

    #[test]
    fn elementwise_gradients() {
        let other = random_tensor([1, 2, 3, 3], 12);
        let build = |g: &mut Graph<f64>, x: Var| {
            let o = g.constant(other.clone());
            let m = g.mul(x, o).unwrap();
            let a = g.add(m, x).unwrap();
            let s = g.sub(a, o).unwrap();
            let r = g.relu(s);
            let sc = g.scale(r, 3.0);
            let off = g.offset(sc, -0.5);
            let ab = g.abs(off);
            g.sum(ab)
        };
        check_grad(build, random_tensor([1, 2, 3, 3], 13), &[0, 4, 8, 11, 17]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full([1, 1, 2, 2], 1.0), false);
        let y = g.leaf(Tensor::full([1, 1, 2, 2], 2.0), true);
        let m = g.mul(x, y).unwrap();
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 3, 3]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros([1, 1, 1, 1]));
        assert!(g.conv2d(x, w, b, 1).is_err());
        assert!(g.max_pool2(x).is_err());
        let y = g.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(g.add(x, y).is_err());
        assert!(g.backward(x).is_err());
    }
}
