//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse, propagating vector-Jacobian products only into
//! nodes that depend on a leaf created with `requires_grad`.

use std::sync::Arc;

use super::conv::{col2im_add, conv_out_size, im2col};
use super::tensor::Tensor;
use crate::encode::Encoding;
use crate::scalar::{gemm, Real};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Dot(Var, Var),
    Div(Var, Var),
    SumSquares(Var),
    Sum(Var),
    Relu(Var),
    Softplus(Var),
    Reshape(Var),
    // `cols` keeps the forward im2col matrices when the weight needs a gradient.
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Option<Vec<T>> },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    L2Normalize(Var),
    Gram(Var, Arc<Encoding<T>>),
    ExtractPatches { x: Var, origins: Vec<(usize, usize)>, size: usize },
    // `batch` marks normalisation by the statistics of the input itself.
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
}

/// Per-channel mean and unbiased variance of one batch-norm input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Added to the variance before taking the inverse square root.
pub const BN_EPS: f64 = 1e-5;

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], retained for leaves only.
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise op on {:?} and {:?}", x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect()).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.map(a, |p| p * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Tensor `a` times the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let v = self.map(a, |p| p * c);
        self.push(v, Op::ScaleBy(a, s), &[a, s])
    }

    /// Full inner product, a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "dot length mismatch");
        let v = self.value(a).dot(self.value(b));
        self.push(Tensor::scalar(v), Op::Dot(a, b), &[a, b])
    }

    /// Quotient of two scalar nodes.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).item() / self.value(b).item();
        self.push(Tensor::scalar(v), Op::Div(a, b), &[a, b])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).dot(self.value(a));
        self.push(Tensor::scalar(v), Op::SumSquares(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(v), Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |p| if p > T::zero() { p } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    /// 2D convolution, `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, k, k], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let (ho, wo) = (conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad));
        let kk = ci * k * k;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let keep = !pointwise && self.needs_grad(w);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        let mut cols = vec![T::zero(); if pointwise { 0 } else if keep { n * kk * ho * wo } else { kk * ho * wo }];
        let wdat = self.value(w).data();
        let xdat = self.value(x).data();
        for s in 0..n {
            let xin = &xdat[s * ci * h * wd..(s + 1) * ci * h * wd];
            let dst = &mut out.data_mut()[s * co * ho * wo..(s + 1) * co * ho * wo];
            if pointwise {
                gemm(false, false, co, ho * wo, kk, T::one(), wdat, xin, T::zero(), dst);
            } else {
                let off = if keep { s * kk * ho * wo } else { 0 };
                let col = &mut cols[off..off + kk * ho * wo];
                im2col(xin, ci, h, wd, k, stride, pad, ho, wo, col);
                gemm(false, false, co, ho * wo, kk, T::one(), wdat, col, T::zero(), dst);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (o, &bv) in bd.iter().enumerate() {
                    dst[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let cols = keep.then_some(cols);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, stride, pad, cols }, &inputs)
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {s:?}");
        let (ho, wo) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[s[0], s[1], ho, wo]);
        let od = out.data_mut();
        for p in 0..nc {
            let (src, dst) = (&xd[p * h * w..], &mut od[p * ho * wo..]);
            for i in 0..ho {
                for j in 0..wo {
                    let a = 2 * i * w + 2 * j;
                    dst[i * wo + j] = q * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
                }
            }
        }
        self.push(out, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[s[0], s[1], ho, wo]);
        let od = out.data_mut();
        for p in 0..nc {
            for i in 0..ho {
                for j in 0..wo {
                    od[p * ho * wo + i * wo + j] = xd[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat {sa:?} with {sb:?}");
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(&ad[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&bd[s * cb * hw..(s + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![n, ca + cb, sa[2], sa[3]], data).expect("shape");
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let hw = s[2] * s[3];
        let inv = T::one() / T::lit(hw as f64);
        let xd = self.value(x).data();
        let data = (0..s[0] * s[1]).map(|p| xd[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(vec![s[0], s[1]], data).expect("shape");
        self.push(out, Op::GlobalAvgPool(x), &[x])
    }

    /// `x: [N, K]`, `w: [O, K]`, `b: [O]` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs[1], ws[1], "linear {xs:?} x {ws:?}^T");
        let (n, k, o) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, o]);
        gemm(false, true, n, o, k, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), out.data_mut());
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(o) {
                row.iter_mut().zip(&bd).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    /// Row-wise `x / ||x||` for `x: [N, D]`. Zero rows map to the constant
    /// unit vector and pass no gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = s[1];
        let mut out = self.value(x).clone();
        let fallback = T::one() / T::lit(d as f64).sqrt();
        for row in out.data_mut().chunks_mut(d) {
            match row_norm(row) {
                Some(nrm) => row.iter_mut().for_each(|v| *v /= nrm),
                None => row.fill(fallback),
            }
        }
        self.push(out, Op::L2Normalize(x), &[x])
    }

    /// `E^H E x` for a complex image stored as planar `[2, H, W]` (any shape
    /// with `2 H W` elements).
    pub fn gram(&mut self, x: Var, enc: &Arc<Encoding<T>>) -> Var {
        let xv = self.value(x);
        let (h, w) = enc.shape();
        assert_eq!(xv.len(), 2 * h * w, "gram input {:?} vs operator {h}x{w}", xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        enc.normal_planar(xv.data(), out.data_mut());
        self.push(out, Op::Gram(x, enc.clone()), &[x])
    }

    /// Crops `[C, H, W]` (or `[1, C, H, W]`) at each origin into `[M, C, P, P]`.
    pub fn extract_patches(&mut self, x: Var, origins: &[(usize, usize)], size: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = match s.len() {
            3 => (s[0], s[1], s[2]),
            4 if s[0] == 1 => (s[1], s[2], s[3]),
            _ => panic!("extract_patches expects [C, H, W], got {s:?}"),
        };
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[origins.len(), c, size, size]);
        let od = out.data_mut();
        for (m, &(r0, c0)) in origins.iter().enumerate() {
            assert!(r0 + size <= h && c0 + size <= w, "patch at {:?} leaves {h}x{w}", (r0, c0));
            for ch in 0..c {
                for i in 0..size {
                    let src = ch * h * w + (r0 + i) * w + c0;
                    let dst = ((m * c + ch) * size + i) * size;
                    od[dst..dst + size].copy_from_slice(&xd[src..src + size]);
                }
            }
        }
        self.push(out, Op::ExtractPatches { x, origins: origins.to_vec(), size }, &[x])
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel of
    /// `x: [N, C, H, W]`. With `stats` given those are the mean and variance;
    /// otherwise the batch statistics are used and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
    ) -> (Var, Option<BatchStats<T>>) {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "batch_norm expects [N, C, H, W], got {s:?}");
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.value(x).data();
        let (mean, var, batch) = match stats {
            Some((m, v)) => {
                assert!(m.len() == c && v.len() == c, "batch_norm statistics for {} channels, need {c}", m.len());
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let count = n * hw;
                assert!(count >= 2, "batch statistics need at least two values per channel");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let vals = (0..n).flat_map(|b| xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter());
                    let m = vals.clone().copied().sum::<T>() / T::lit(count as f64);
                    mean[ch] = m;
                    var[ch] = vals.map(|&v| (v - m) * (v - m)).sum::<T>() / T::lit(count as f64);
                }
                let unbiased = T::lit(count as f64 / (count - 1) as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.iter().map(|&v| v * unbiased).collect() };
                (mean, var, Some(stats))
            }
        };
        let eps = T::lit(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == c && b.len() == c, "batch_norm affine parameters must have {c} entries");
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = Tensor::zeros(&s);
        for (p, (xh, o)) in xhat.chunks_mut(hw).zip(out.data_mut().chunks_mut(hw)).enumerate() {
            let ch = p % c;
            for ((h, y), &v) in xh.iter_mut().zip(o.iter_mut()).zip(&xd[p * hw..(p + 1) * hw]) {
                *h = (v - mean[ch]) * inv_std[ch];
                *y = g[ch] * *h + b[ch];
            }
        }
        let keep = batch.is_some();
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch: keep };
        (self.push(out, op, &[x, gamma, beta]), batch)
    }

    /// Backpropagates the scalar `loss` with seed 1.
    pub fn backward_scalar(&self, loss: Var) -> Grads<T> {
        self.backward(vec![(loss, Tensor::full(self.shape(loss), T::one()))])
    }

    /// Backpropagates arbitrary output cotangents.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let upto = seeds.iter().map(|(v, _)| v.0 + 1).max().unwrap_or(0);
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(v).len(), "seed shape mismatch");
            self.accumulate(&mut grads, v, g);
        }
        for i in (0..upto).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g.reshaped(self.nodes[v.0].value.shape())),
        }
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape().to_vec(), data).expect("shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*b) {
                    let neg = gd.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, like(*b, neg));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.needs_grad(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|&p| p * *c).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::ScaleBy(a, s) => {
                if self.needs_grad(*s) {
                    let gs = g.dot(self.value(*a));
                    self.accumulate(grads, *s, Tensor::scalar(gs).reshaped(self.shape(*s)));
                }
                if self.needs_grad(*a) {
                    let c = self.value(*s).item();
                    let d = gd.iter().map(|&p| p * c).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
            }
            Op::Dot(a, b) => {
                let g0 = g.item();
                if self.needs_grad(*a) {
                    let d = self.value(*b).data().iter().map(|&q| q * g0).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.needs_grad(*b) {
                    let d = self.value(*a).data().iter().map(|&q| q * g0).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Div(a, b) => {
                let g0 = g.item();
                let (x, y) = (self.value(*a).item(), self.value(*b).item());
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, like(*a, vec![g0 / y]));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, like(*b, vec![-g0 * x / (y * y)]));
                }
            }
            Op::SumSquares(a) => {
                let two_g = T::lit(2.0) * g.item();
                let d = self.value(*a).data().iter().map(|&p| p * two_g).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Sum(a) => {
                let g0 = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g0));
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&p, &x)| if x > T::zero() { p } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Softplus(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(&p, &x)| p * sigmoid(x)).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshaped(self.shape(*a)));
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                self.conv2d_backward(&g, *x, *w, *b, (*stride, *pad), cols.as_deref(), grads)
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let q = T::lit(0.25);
                let mut d = vec![T::zero(); s.iter().product()];
                for p in 0..s[0] * s[1] {
                    for i in 0..h {
                        for j in 0..w {
                            d[p * h * w + i * w + j] = q * gd[p * ho * wo + (i / 2) * wo + j / 2];
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (2 * h, 2 * w);
                let mut d = vec![T::zero(); s.iter().product()];
                for p in 0..s[0] * s[1] {
                    for i in 0..ho {
                        for j in 0..wo {
                            d[p * h * w + (i / 2) * w + j / 2] += gd[p * ho * wo + i * wo + j];
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&gd[base..base + ca * hw]);
                    db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                let inv = T::one() / T::lit(hw as f64);
                let d = (0..s.iter().product::<usize>()).map(|idx| gd[idx / hw] * inv).collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (n, k, o) = (xs[0], xs[1], ws[0]);
                if self.needs_grad(*x) {
                    let mut d = vec![T::zero(); n * k];
                    gemm(false, false, n, k, o, T::one(), gd, self.value(*w).data(), T::zero(), &mut d);
                    self.accumulate(grads, *x, like(*x, d));
                }
                if self.needs_grad(*w) {
                    let mut d = vec![T::zero(); o * k];
                    gemm(true, false, o, k, n, T::one(), gd, self.value(*x).data(), T::zero(), &mut d);
                    self.accumulate(grads, *w, like(*w, d));
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut d = vec![T::zero(); o];
                        for row in gd.chunks(o) {
                            d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        self.accumulate(grads, *b, like(*b, d));
                    }
                }
            }
            Op::L2Normalize(x) => {
                let d = self.shape(*x)[1];
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let mut out = vec![T::zero(); xv.len()];
                for r in 0..xv.len() / d {
                    let span = r * d..(r + 1) * d;
                    let Some(nrm) = row_norm(&xv[span.clone()]) else { continue };
                    let (y, gr) = (&yv[span.clone()], &gd[span.clone()]);
                    let yg: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yi), &gi) in out[span].iter_mut().zip(y).zip(gr) {
                        *o = (gi - yi * yg) / nrm;
                    }
                }
                self.accumulate(grads, *x, like(*x, out));
            }
            Op::Gram(x, enc) => {
                // E^H E is self-adjoint.
                let mut d = vec![T::zero(); gd.len()];
                enc.normal_planar(gd, &mut d);
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                self.batch_norm_backward(gd, (*x, *gamma, *beta), xhat, inv_std, *batch, grads)
            }
            Op::ExtractPatches { x, origins, size } => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let c = s[s.len() - 3];
                let size = *size;
                let mut d = vec![T::zero(); s.iter().product()];
                for (m, &(r0, c0)) in origins.iter().enumerate() {
                    for ch in 0..c {
                        for i in 0..size {
                            let dst = ch * h * w + (r0 + i) * w + c0;
                            let src = ((m * c + ch) * size + i) * size;
                            d[dst..dst + size].iter_mut().zip(&gd[src..src + size]).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        gd: &[T],
        (x, gamma, beta): (Var, Var, Var),
        xhat: &[T],
        inv_std: &[T],
        batch: bool,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (p, (gp, xp)) in gd.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
            let ch = p % c;
            sum_g[ch] += gp.iter().copied().sum::<T>();
            sum_gx[ch] += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
        }
        if self.needs_grad(gamma) {
            self.accumulate(grads, gamma, Tensor::new(vec![c], sum_gx.clone()).expect("shape"));
        }
        if self.needs_grad(beta) {
            self.accumulate(grads, beta, Tensor::new(vec![c], sum_g.clone()).expect("shape"));
        }
        if self.needs_grad(x) {
            let g = self.value(gamma).data();
            let inv_m = T::one() / T::lit((n * hw) as f64);
            let mut d = vec![T::zero(); gd.len()];
            for (p, ((dp, gp), xp)) in d.chunks_mut(hw).zip(gd.chunks(hw)).zip(xhat.chunks(hw)).enumerate() {
                let ch = p % c;
                let k = g[ch] * inv_std[ch];
                for ((o, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                    *o = if batch { k * (gv - inv_m * (sum_g[ch] + xv * sum_gx[ch])) } else { k * gv };
                }
            }
            self.accumulate(grads, x, Tensor::new(s, d).expect("shape"));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        (stride, pad): (usize, usize),
        saved_cols: Option<&[T]>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let (ho, wo) = (conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad));
        let kk = ci * k * k;
        let hw = ho * wo;
        let gd = g.data();
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let need_x = self.needs_grad(x);
        let need_w = self.needs_grad(w);
        let mut gw = vec![T::zero(); co * kk];
        let mut gx = if need_x { vec![T::zero(); xd.len()] } else { Vec::new() };
        let mut col = vec![T::zero(); if pointwise || saved_cols.is_some() { 0 } else { kk * hw }];
        let mut gcol = vec![T::zero(); if need_x && !pointwise { kk * hw } else { 0 }];
        for s in 0..n {
            let gs = &gd[s * co * hw..(s + 1) * co * hw];
            let xin = &xd[s * ci * h * wd..(s + 1) * ci * h * wd];
            if need_w {
                let cols: &[T] = if pointwise {
                    xin
                } else if let Some(saved) = saved_cols {
                    &saved[s * kk * hw..(s + 1) * kk * hw]
                } else {
                    im2col(xin, ci, h, wd, k, stride, pad, ho, wo, &mut col);
                    &col
                };
                gemm(false, true, co, kk, hw, T::one(), gs, cols, T::one(), &mut gw);
            }
            if need_x {
                let gxs = &mut gx[s * ci * h * wd..(s + 1) * ci * h * wd];
                if pointwise {
                    gemm(true, false, kk, hw, co, T::one(), wdat, gs, T::one(), gxs);
                } else {
                    gemm(true, false, kk, hw, co, T::one(), wdat, gs, T::zero(), &mut gcol);
                    col2im_add(&gcol, ci, h, wd, k, stride, pad, ho, wo, gxs);
                }
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(ws.clone(), gw).expect("shape"));
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(xs.clone(), gx).expect("shape"));
        }
        if let Some(b) = b {
            if self.needs_grad(b) {
                let mut gb = vec![T::zero(); co];
                for s in 0..n {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        *acc += gd[(s * co + o) * hw..(s * co + o + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(vec![co], gb).expect("shape"));
            }
        }
    }
}

fn row_norm<T: Real>(row: &[T]) -> Option<T> {
    let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
    (n > T::min_positive_value().sqrt()).then_some(n)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, for initialising positive parameters.
pub fn softplus_inverse<T: Real>(y: T) -> T {
    // ln(exp(y) - 1), written to stay accurate for large y.
    y + (-(-y).exp_m1()).ln()
}
