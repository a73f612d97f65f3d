//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value,
//! and [`Graph::backward`] walks the tape in reverse. Only nodes reachable
//! from a leaf created with `requires_grad` receive gradients, so values that
//! enter as constants (momentum-encoder keys, inputs) are detached.

use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Upsample2(Var),
    MaxPoolSame {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// Normalized input, same shape as `x`.
        xhat: Vec<T>,
        /// Reciprocal standard deviation per `(sample, group)`.
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        /// Reciprocal standard deviation per feature.
        rstd: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
    Custom(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output geometry of a 2-D convolution with square kernel.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Unfolds `x` into a `[C*k*k, N*Ho*Wo]` column matrix.
fn im2col<T: Real>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> (Vec<T>, usize, usize) {
    let (n, c, h, w) = x.dims4();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let p = ho * wo;
    let cols_n = n * p;
    let mut cols = vec![T::zero(); c * k * k * cols_n];
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..n {
                    let src = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let base = ni * p + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Folds a column matrix back, accumulating into `dx` (shape of the input).
fn col2im<T: Real>(cols: &[T], dx: &mut Tensor<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) {
    let (n, c, h, w) = dx.dims4();
    let p = ho * wo;
    let cols_n = n * p;
    let dxd = dx.data_mut();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..n {
                    let dst = &mut dxd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ni * p + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// 2-D convolution, `x: [N,C,H,W]`, `w: [Co,C,k,k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, _, _) = xv.dims4();
        let (co, ci, k, k2) = wv.dims4();
        assert_eq!(ci, c, "conv2d: input has {c} channels, weight expects {ci}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let (cols, ho, wo) = im2col(xv, k, stride, pad);
        let p = ho * wo;
        let mut out_mat = vec![T::zero(); co * n * p];
        gemm(co, c * k * k, n * p, wv.data(), false, &cols, false, &mut out_mat, false);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        let bias = b.map(|b| self.value(b).data().to_vec());
        let od = out.data_mut();
        for ni in 0..n {
            for o in 0..co {
                let bv = bias.as_ref().map_or(T::zero(), |bb| bb[o]);
                let src = &out_mat[o * n * p + ni * p..o * n * p + (ni + 1) * p];
                let dst = &mut od[(ni * co + o) * p..(ni * co + o + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v *= s
            }
        });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, s), rg)
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let inv = T::lit(1.0 / (h * w) as f64);
        let data = xv
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::GlobalAvgPool(x), rg)
    }

    /// Channel-axis concatenation of NCHW maps with equal N, H, W.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut ctot = 0;
        for &v in xs {
            let (n2, c, h2, w2) = self.value(v).dims4();
            assert!(n2 == n && h2 == h && w2 == w, "concat: spatial/batch mismatch");
            ctot += c;
        }
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for ni in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[ni * c * h * w..(ni + 1) * c * h * w]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::from_vec(&[n, ctot, h, w], data), Op::Concat(xs.to_vec()), rg)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let (src, dst) = (xv.data(), out.data_mut());
        for plane in 0..n * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[plane * 4 * h * w + i * 2 * w + j] = src[plane * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Max pooling with stride 1 and "same" padding (padding never wins).
    pub fn max_pool_same(&mut self, x: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "max_pool_same needs an odd kernel");
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut argmax = vec![0usize; n * c * h * w];
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut best = T::neg_infinity();
                    let mut best_idx = base + (i as usize) * w + j as usize;
                    for di in -r..=r {
                        let y = i + di;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dj in -r..=r {
                            let xx = j + dj;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = base + y as usize * w + xx as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = base + i as usize * w + j as usize;
                    dst[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPoolSame { x, argmax }, rg)
    }

    /// `x: [N,I]`, `w: [O,I]`, `b: [O]` -> `[N,O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, i) = xv.dims2();
        let (o, i2) = wv.dims2();
        assert_eq!(i, i2, "linear: input width {i} vs weight {i2}");
        let mut out = vec![T::zero(); n * o];
        gemm(n, i, o, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += *bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(&[n, o], out), Op::Linear { x, w, b }, rg)
    }

    /// Row-wise `x / max(‖x‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let eps = T::lit(eps);
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(n);
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let denom = if norm > eps { norm } else { eps };
            row.iter_mut().for_each(|v| *v = *v / denom);
            norms.push(norm);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms, eps }, rg)
    }

    /// `Σ cᵢ·sᵢ` over scalar nodes.
    /// Group normalization of `x: [N,C,H,W]` over `groups` channel groups
    /// per sample, followed by the per-channel affine `gamma`, `beta: [C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!((gv.len(), bv.len()), (c, c), "group_norm: affine parameters must have {c} entries");
        let m = c / groups * h * w;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = Vec::with_capacity(n * groups);
        let mut out = Tensor::zeros(xv.shape());
        for (src, dst) in xv.data().chunks(m).zip(xhat.chunks_mut(m)) {
            let mean = src.iter().copied().sum::<T>() / T::lit(m as f64);
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::lit(m as f64);
            let r = T::one() / (var + T::lit(eps)).sqrt();
            rstd.push(r);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * r;
            }
        }
        let plane = h * w;
        for (i, (o, &xh)) in out.data_mut().iter_mut().zip(&xhat).enumerate() {
            let ch = (i / plane) % c;
            *o = xh * gv[ch] + bv[ch];
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, rg)
    }

    /// Normalizes each feature of `x: [N,D]` over the batch with the batch's
    /// own statistics (no running averages), then applies `gamma`, `beta: [D]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!((gv.len(), bv.len()), (d, d), "batch_norm: affine parameters must have {d} entries");
        let inv_n = T::lit(1.0 / n as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = Vec::with_capacity(d);
        for j in 0..d {
            let col = (0..n).map(|i| xv.data()[i * d + j]);
            let mean = col.clone().sum::<T>() * inv_n;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + T::lit(eps)).sqrt();
            rstd.push(r);
            for i in 0..n {
                xhat[i * d + j] = (xv.data()[i * d + j] - mean) * r;
            }
        }
        let out = Tensor::from_vec(&[n, d], xhat.iter().enumerate().map(|(k, &v)| v * gv[k % d] + bv[k % d]).collect());
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = T::zero();
        let mut ops = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            let c = T::lit(c);
            total += self.value(v).item() * c;
            ops.push((v, c));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(ops), rg)
    }

    /// A scalar whose value and input gradients were computed outside the
    /// tape. Each gradient must match the shape of its input.
    pub fn custom_scalar(&mut self, value: T, grads: Vec<(Var, Tensor<T>)>) -> Var {
        for (v, g) in &grads {
            assert_eq!(self.value(*v).shape(), g.shape(), "custom_scalar: gradient shape");
        }
        let rg = grads.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::Custom(grads), rg)
    }

    /// Back-propagates from scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, _, _) = xv.dims4();
                let (co, _, k, _) = wv.dims4();
                let (_, _, ho, wo) = gout.dims4();
                let p = ho * wo;
                let mut gmat = vec![T::zero(); co * n * p];
                let gd = gout.data();
                for ni in 0..n {
                    for o in 0..co {
                        gmat[o * n * p + ni * p..o * n * p + (ni + 1) * p]
                            .copy_from_slice(&gd[(ni * co + o) * p..(ni * co + o + 1) * p]);
                    }
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb: Vec<T> = gmat.chunks(n * p).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::from_vec(&[co], gb));
                    }
                }
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                if need_w || need_x {
                    let ck = c * k * k;
                    if need_w {
                        let (cols, _, _) = im2col(xv, k, *stride, *pad);
                        let mut gw = vec![T::zero(); co * ck];
                        gemm(co, n * p, ck, &gmat, false, &cols, true, &mut gw, false);
                        self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), gw));
                    }
                    if need_x {
                        let mut gcols = vec![T::zero(); ck * n * p];
                        gemm(ck, co, n * p, wv.data(), true, &gmat, false, &mut gcols, false);
                        let mut gx = Tensor::zeros(xv.shape());
                        col2im(&gcols, &mut gx, k, *stride, *pad, ho, wo);
                        self.accumulate(grads, *x, gx);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Relu(x) => {
                let mut g = gout.clone();
                for (gv, ov) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if *ov <= T::zero() {
                        *gv = T::zero();
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x, s) => {
                let mut g = gout.clone();
                for (gv, iv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *iv < T::zero() {
                        *gv *= *s;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let inv = T::lit(1.0 / (h * w) as f64);
                let mut g = Tensor::zeros(xv.shape());
                for (plane, gv) in g.data_mut().chunks_mut(h * w).zip(gout.data()) {
                    plane.iter_mut().for_each(|v| *v = *gv * inv);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Concat(xs) => {
                let (n, ctot, h, w) = gout.dims4();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut data = Vec::with_capacity(n * c * h * w);
                        for ni in 0..n {
                            let start = (ni * ctot + offset) * h * w;
                            data.extend_from_slice(&gout.data()[start..start + c * h * w]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(&[n, c, h, w], data));
                    }
                    offset += c;
                }
            }
            Op::Upsample2(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let mut g = Tensor::zeros(xv.shape());
                let (src, dst) = (gout.data(), g.data_mut());
                for plane in 0..n * c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[plane * h * w + (i / 2) * w + j / 2] += src[plane * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::MaxPoolSame { x, argmax } => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                let dst = g.data_mut();
                for (o, &src_idx) in argmax.iter().enumerate() {
                    dst[src_idx] += gout.data()[o];
                }
                self.accumulate(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, i) = xv.dims2();
                let (o, _) = wv.dims2();
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); o];
                        for row in gout.data().chunks(o) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += *v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[o], gb));
                    }
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); o * i];
                    gemm(o, n, i, gout.data(), true, xv.data(), false, &mut gw, false);
                    self.accumulate(grads, *w, Tensor::from_vec(&[o, i], gw));
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    gemm(n, o, i, gout.data(), false, wv.data(), false, &mut gx, false);
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, i], gx));
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                let (_, d) = node.value.dims2();
                let mut g = Tensor::zeros(node.value.shape());
                for (r, norm) in norms.iter().enumerate() {
                    let y = &node.value.data()[r * d..(r + 1) * d];
                    let gy = &gout.data()[r * d..(r + 1) * d];
                    let gx = &mut g.data_mut()[r * d..(r + 1) * d];
                    if *norm > *eps {
                        let dot: T = y.iter().zip(gy).map(|(a, b)| *a * *b).sum();
                        for k in 0..d {
                            gx[k] = (gy[k] - y[k] * dot) / *norm;
                        }
                    } else {
                        for k in 0..d {
                            gx[k] = gy[k] / *eps;
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let (_, c, h, w) = gout.dims4();
                let plane = h * w;
                let gv = self.value(*gamma).data();
                let gd = gout.data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let (mut gg, mut gb) = (vec![T::zero(); c], vec![T::zero(); c]);
                    for (i, (&dy, &xh)) in gd.iter().zip(xhat).enumerate() {
                        let ch = (i / plane) % c;
                        gg[ch] += dy * xh;
                        gb[ch] += dy;
                    }
                    self.accumulate(grads, *gamma, Tensor::from_vec(&[c], gg));
                    self.accumulate(grads, *beta, Tensor::from_vec(&[c], gb));
                }
                if self.rg(*x) {
                    let m = c / groups * plane;
                    let mut gx = Tensor::zeros(gout.shape());
                    for (blk, r) in rstd.iter().enumerate() {
                        let range = blk * m..(blk + 1) * m;
                        let dxhat: Vec<T> = range.clone().map(|i| gd[i] * gv[(i / plane) % c]).collect();
                        let xh = &xhat[range.clone()];
                        let inv_m = T::lit(1.0 / m as f64);
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_m;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() * inv_m;
                        for ((o, &d), &xv) in gx.data_mut()[range].iter_mut().zip(&dxhat).zip(xh) {
                            *o = *r * (d - mean_d - xv * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd } => {
                let (n, d) = gout.dims2();
                let gv = self.value(*gamma).data();
                let gd = gout.data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let (mut gg, mut gb) = (vec![T::zero(); d], vec![T::zero(); d]);
                    for (k, (&dy, &xh)) in gd.iter().zip(xhat).enumerate() {
                        gg[k % d] += dy * xh;
                        gb[k % d] += dy;
                    }
                    self.accumulate(grads, *gamma, Tensor::from_vec(&[d], gg));
                    self.accumulate(grads, *beta, Tensor::from_vec(&[d], gb));
                }
                if self.rg(*x) {
                    let inv_n = T::lit(1.0 / n as f64);
                    let mut gx = Tensor::zeros(gout.shape());
                    for j in 0..d {
                        let dxhat: Vec<T> = (0..n).map(|i| gd[i * d + j] * gv[j]).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_n;
                        let mean_dx = (0..n).map(|i| dxhat[i] * xhat[i * d + j]).sum::<T>() * inv_n;
                        for i in 0..n {
                            gx.data_mut()[i * d + j] = rstd[j] * (dxhat[i] - mean_d - xhat[i * d + j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::WeightedSum(terms) => {
                let go = gout.item();
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor::scalar(go * c));
                }
            }
            Op::Custom(parts) => {
                let go = gout.item();
                for (v, g) in parts {
                    let mut g = g.clone();
                    g.scale(go);
                    self.accumulate(grads, *v, g);
                }
            }
        }
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
