//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Tape`] records every operation applied during one forward pass.
//! [`Tape::backward`] walks it in reverse and returns the gradient of a
//! scalar node with respect to every node that requires a gradient.
//! Convolutions lower to im2col + GEMM; the column buffer is rebuilt in the
//! backward pass instead of being kept alive on the tape.

use std::cell::RefCell;

use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    ReflectPad { input: Var, pad: usize },
    UpsampleNearest { input: Var, factor: usize },
    InstanceNorm { input: Var, inv_std: Vec<T> },
    Relu { input: Var },
    LeakyRelu { input: Var, slope: T },
    Tanh { input: Var },
    Sigmoid { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Abs { input: Var },
    Square { input: Var },
    Affine { input: Var, scale: T },
    LogClamped { input: Var, eps: T },
    Mean { input: Var },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Column buffer shared by every convolution; always fully overwritten
    /// before it is read.
    scratch: RefCell<Vec<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

pub(crate) fn conv_transpose_out(size: usize, geom: ConvGeom) -> Option<usize> {
    ((size - 1) * geom.stride + geom.kernel + geom.output_padding).checked_sub(2 * geom.padding)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(w, wo, kj, s, p);
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    let out = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[ih as usize * w..(ih as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let start = lo * s + kj - p;
                    if s == 1 {
                        out[lo..hi].copy_from_slice(&line[start..start + hi - lo]);
                    } else {
                        for (o, v) in out[lo..hi].iter_mut().zip(line[start..].iter().step_by(s)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ow·s + kj − p` lies inside
/// `[0, w)`.
fn valid_range(w: usize, wo: usize, kj: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    if w + p <= kj {
        return (lo, lo);
    }
    let hi = ((w - 1 + p - kj) / s + 1).min(wo);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(w, wo, kj, s, p);
                if lo >= hi {
                    continue;
                }
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let line = &mut dst[ih as usize * w..(ih as usize + 1) * w];
                    let start = lo * s + kj - p;
                    let vals = &src[oh * wo + lo..oh * wo + hi];
                    if s == 1 {
                        for (d, v) in line[start..start + vals.len()].iter_mut().zip(vals) {
                            *d = *d + *v;
                        }
                    } else {
                        for (d, v) in line[start..].iter_mut().step_by(s).zip(vals) {
                            *d = *d + *v;
                        }
                    }
                }
            }
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    r as usize
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), scratch: RefCell::new(Vec::new()) }
    }

    fn take_scratch(&self, len: usize) -> Vec<T> {
        let mut buf = self.scratch.take();
        buf.resize(len, T::zero());
        buf
    }

    fn put_scratch(&self, buf: Vec<T>) {
        self.scratch.replace(buf);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D convolution with zero padding. `weight` is `[out, in, k, k]`,
    /// `bias` is `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Var {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        assert_eq!(ws.h, ws.w, "square kernels only");
        assert_eq!(xs.c, ws.c, "conv2d channel mismatch: input {xs}, weight {ws}");
        let k = ws.h;
        let ho = conv_out(xs.h, k, stride, padding).expect("conv2d input smaller than kernel");
        let wo = conv_out(xs.w, k, stride, padding).expect("conv2d input smaller than kernel");
        let cout = ws.n;
        let out_shape = Shape::new(xs.n, cout, ho, wo);
        let mut out = Tensor::zeros(out_shape);
        let mut cols = self.take_scratch(xs.c * k * k * ho * wo);
        {
            let x = self.value(input);
            let wt = self.value(weight);
            let b = bias.map(|b| self.value(b));
            for n in 0..xs.n {
                im2col(x.sample(n), xs.c, xs.h, xs.w, k, stride, padding, ho, wo, &mut cols);
                let o = out.sample_mut(n);
                if let Some(b) = b {
                    for (co, chunk) in o.chunks_mut(ho * wo).enumerate() {
                        chunk.fill(b.data()[co]);
                    }
                }
                gemm(
                    MatRef::new(wt.data(), cout, xs.c * k * k),
                    MatRef::new(&cols, xs.c * k * k, ho * wo),
                    T::one(),
                    o,
                );
            }
        }
        self.put_scratch(cols);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let geom = ConvGeom { kernel: k, stride, padding, output_padding: 0 };
        self.push(out, Op::Conv2d { input, weight, bias, geom }, rg)
    }

    /// Fractionally-strided convolution. `weight` is `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Var {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        assert_eq!(ws.h, ws.w, "square kernels only");
        assert_eq!(xs.c, ws.n, "conv_transpose2d channel mismatch: input {xs}, weight {ws}");
        assert!(output_padding < stride, "output padding must be smaller than stride");
        let k = ws.h;
        let cout = ws.c;
        let geom = ConvGeom { kernel: k, stride, padding, output_padding };
        let ho = conv_transpose_out(xs.h, geom).expect("invalid transpose geometry");
        let wo = conv_transpose_out(xs.w, geom).expect("invalid transpose geometry");
        let mut out = Tensor::zeros(Shape::new(xs.n, cout, ho, wo));
        let hw = xs.h * xs.w;
        let mut cols = self.take_scratch(cout * k * k * hw);
        {
            let x = self.value(input);
            let wt = self.value(weight);
            let b = bias.map(|b| self.value(b));
            for n in 0..xs.n {
                gemm(
                    MatRef::new(wt.data(), xs.c, cout * k * k).t(),
                    MatRef::new(x.sample(n), xs.c, hw),
                    T::zero(),
                    &mut cols,
                );
                let o = out.sample_mut(n);
                col2im_add(&cols, cout, ho, wo, k, stride, padding, xs.h, xs.w, o);
                if let Some(b) = b {
                    for (co, chunk) in o.chunks_mut(ho * wo).enumerate() {
                        let bv = b.data()[co];
                        chunk.iter_mut().for_each(|v| *v = *v + bv);
                    }
                }
            }
        }
        self.put_scratch(cols);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(out, Op::ConvTranspose2d { input, weight, bias, geom }, rg)
    }

    pub fn reflect_pad(&mut self, input: Var, pad: usize) -> Var {
        let xs = self.shape(input);
        assert!(pad < xs.h && pad < xs.w, "reflection pad {pad} too large for {xs}");
        let (h2, w2) = (xs.h + 2 * pad, xs.w + 2 * pad);
        let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, h2, w2));
        {
            let x = self.value(input);
            let od = out.data_mut();
            for nc in 0..xs.n * xs.c {
                let src = &x.data()[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
                let dst = &mut od[nc * h2 * w2..(nc + 1) * h2 * w2];
                for i in 0..h2 {
                    let si = reflect(i as isize - pad as isize, xs.h);
                    for j in 0..w2 {
                        let sj = reflect(j as isize - pad as isize, xs.w);
                        dst[i * w2 + j] = src[si * xs.w + sj];
                    }
                }
            }
        }
        let rg = self.any_grad(&[input]);
        self.push(out, Op::ReflectPad { input, pad }, rg)
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Var {
        let xs = self.shape(input);
        let (h2, w2) = (xs.h * factor, xs.w * factor);
        let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, h2, w2));
        {
            let x = self.value(input);
            let od = out.data_mut();
            for nc in 0..xs.n * xs.c {
                for i in 0..h2 {
                    for j in 0..w2 {
                        od[(nc * h2 + i) * w2 + j] =
                            x.data()[(nc * xs.h + i / factor) * xs.w + j / factor];
                    }
                }
            }
        }
        let rg = self.any_grad(&[input]);
        self.push(out, Op::UpsampleNearest { input, factor }, rg)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Var {
        let xs = self.shape(input);
        let plane = xs.plane();
        let x = self.value(input);
        let mut out = Tensor::zeros(xs);
        let mut inv_std = Vec::with_capacity(xs.n * xs.c);
        for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::of_f64((s.as_f64() - mean) * is);
            }
            inv_std.push(T::of_f64(is));
        }
        let rg = self.any_grad(&[input]);
        self.push(out, Op::InstanceNorm { input, inv_std }, rg)
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(input).map(f);
        let rg = self.any_grad(&[input]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.max(T::zero()), Op::Relu { input })
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let slope = T::of_f64(slope);
        self.unary(
            input,
            move |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu { input, slope },
        )
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.tanh(), Op::Tanh { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { input })
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.abs(), Op::Abs { input })
    }

    pub fn square(&mut self, input: Var) -> Var {
        self.unary(input, |v| v * v, Op::Square { input })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::of_f64(scale), T::of_f64(shift));
        self.unary(input, move |v| a * v + b, Op::Affine { input, scale: a })
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, input: Var, eps: f64) -> Var {
        let e = T::of_f64(eps);
        self.unary(input, move |v| v.max(e).ln(), Op::LogClamped { input, eps: e })
    }

    /// Hash of the branch every piecewise op took (ReLU, leaky ReLU, `|x|`
    /// and the log clamp). Two forward passes of the same graph with equal
    /// fingerprints evaluated in the same smooth piece of the function.
    pub fn branch_fingerprint(&self) -> u64 {
        // FNV-1a over (node index, branch bits).
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let (input, cut) = match &node.op {
                Op::Relu { input } | Op::LeakyRelu { input, .. } | Op::Abs { input } => (*input, T::zero()),
                Op::LogClamped { input, eps } => (*input, *eps),
                _ => continue,
            };
            mix(i as u64);
            for chunk in self.value(input).data().chunks(64) {
                mix(chunk.iter().enumerate().fold(0u64, |acc, (k, &v)| acc | ((v > cut) as u64) << k));
            }
        }
        h
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("shape preserved");
        let rg = self.any_grad(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Mean over every element, as a scalar node.
    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = x.data().iter().map(|v| v.as_f64()).sum::<f64>() / x.len() as f64;
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(T::of_f64(m)), Op::Mean { input }, rg)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            assert_eq!(self.shape(v), Shape::scalar(), "weighted_sum expects scalars");
            total += w * self.value(v).item().as_f64();
        }
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, w)| (v, T::of_f64(w))).collect();
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&deps);
        self.push(Tensor::scalar(T::of_f64(total)), Op::WeightedSum { terms }, rg)
    }

    /// Gradient of the scalar `loss` with respect to every node on the tape
    /// that requires one. Intermediate gradients are released as soon as
    /// they have been propagated; leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), Shape::scalar(), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v))
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weight);
                let os = out.shape();
                let (k, s, p) = (geom.kernel, geom.stride, geom.padding);
                let (ho, wo) = (os.h, os.w);
                let ckk = xs.c * k * k;
                let need_x = self.requires_grad(*input);
                let need_w = self.requires_grad(*weight);
                let x = self.value(*input);
                let wt = self.value(*weight);
                let mut dx = need_x.then(|| self.zeros_like(*input));
                let mut dw = need_w.then(|| self.zeros_like(*weight));
                let mut cols = self.take_scratch(ckk * ho * wo);
                for n in 0..xs.n {
                    let gn = g.sample(n);
                    if let Some(dw) = dw.as_mut() {
                        im2col(x.sample(n), xs.c, xs.h, xs.w, k, s, p, ho, wo, &mut cols);
                        gemm(
                            MatRef::new(gn, ws.n, ho * wo),
                            MatRef::new(&cols, ckk, ho * wo).t(),
                            T::one(),
                            dw.data_mut(),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            MatRef::new(wt.data(), ws.n, ckk).t(),
                            MatRef::new(gn, ws.n, ho * wo),
                            T::zero(),
                            &mut cols,
                        );
                        col2im_add(&cols, xs.c, xs.h, xs.w, k, s, p, ho, wo, dx.sample_mut(n));
                    }
                }
                self.put_scratch(cols);
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let db = self.bias_grad(g, ws.n);
                        self.accumulate(grads, *b, db);
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weight, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weight);
                let os = out.shape();
                let (k, s, p) = (geom.kernel, geom.stride, geom.padding);
                let cout = ws.c;
                let hw = xs.h * xs.w;
                let need_x = self.requires_grad(*input);
                let need_w = self.requires_grad(*weight);
                let x = self.value(*input);
                let wt = self.value(*weight);
                let mut dx = need_x.then(|| self.zeros_like(*input));
                let mut dw = need_w.then(|| self.zeros_like(*weight));
                let mut dcols = self.take_scratch(cout * k * k * hw);
                if need_x || need_w {
                    for n in 0..xs.n {
                        im2col(g.sample(n), cout, os.h, os.w, k, s, p, xs.h, xs.w, &mut dcols);
                        if let Some(dx) = dx.as_mut() {
                            gemm(
                                MatRef::new(wt.data(), xs.c, cout * k * k),
                                MatRef::new(&dcols, cout * k * k, hw),
                                T::zero(),
                                dx.sample_mut(n),
                            );
                        }
                        if let Some(dw) = dw.as_mut() {
                            gemm(
                                MatRef::new(x.sample(n), xs.c, hw),
                                MatRef::new(&dcols, cout * k * k, hw).t(),
                                T::one(),
                                dw.data_mut(),
                            );
                        }
                    }
                }
                self.put_scratch(dcols);
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let db = self.bias_grad(g, cout);
                        self.accumulate(grads, *b, db);
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weight, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::ReflectPad { input, pad } => {
                let xs = self.shape(*input);
                let (h2, w2) = (xs.h + 2 * pad, xs.w + 2 * pad);
                let mut dx = self.zeros_like(*input);
                let dd = dx.data_mut();
                for nc in 0..xs.n * xs.c {
                    let src = &g.data()[nc * h2 * w2..(nc + 1) * h2 * w2];
                    let dst = &mut dd[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
                    for i in 0..h2 {
                        let si = reflect(i as isize - *pad as isize, xs.h);
                        for j in 0..w2 {
                            let sj = reflect(j as isize - *pad as isize, xs.w);
                            dst[si * xs.w + sj] = dst[si * xs.w + sj] + src[i * w2 + j];
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::UpsampleNearest { input, factor } => {
                let xs = self.shape(*input);
                let (h2, w2) = (xs.h * factor, xs.w * factor);
                let mut dx = self.zeros_like(*input);
                let dd = dx.data_mut();
                for nc in 0..xs.n * xs.c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            let t = (nc * xs.h + i / factor) * xs.w + j / factor;
                            dd[t] = dd[t] + g.data()[(nc * h2 + i) * w2 + j];
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::InstanceNorm { input, inv_std } => {
                let plane = out.shape().plane();
                let mut dx = self.zeros_like(*input);
                for (((gy, y), d), &is) in g
                    .data()
                    .chunks(plane)
                    .zip(out.data().chunks(plane))
                    .zip(dx.data_mut().chunks_mut(plane))
                    .zip(inv_std)
                {
                    let mg = gy.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
                    let mgy = gy
                        .iter()
                        .zip(y)
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum::<f64>()
                        / plane as f64;
                    let is = is.as_f64();
                    for ((dv, &gv), &yv) in d.iter_mut().zip(gy).zip(y) {
                        *dv = T::of_f64(is * (gv.as_f64() - mg - yv.as_f64() * mgy));
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Relu { input } => {
                let dx = self.zip_grad(g, out, |gv, y| if y > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *input, dx);
            }
            Op::LeakyRelu { input, slope } => {
                let s = *slope;
                let x = self.value(*input);
                let dx = self.zip_grad(g, x, move |gv, xv| if xv > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *input, dx);
            }
            Op::Tanh { input } => {
                let dx = self.zip_grad(g, out, |gv, y| gv * (T::one() - y * y));
                self.accumulate(grads, *input, dx);
            }
            Op::Sigmoid { input } => {
                let dx = self.zip_grad(g, out, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *input, dx);
            }
            Op::Abs { input } => {
                let x = self.value(*input);
                let dx = self.zip_grad(g, x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *input, dx);
            }
            Op::Square { input } => {
                let x = self.value(*input);
                let two = T::of_f64(2.0);
                let dx = self.zip_grad(g, x, move |gv, xv| gv * two * xv);
                self.accumulate(grads, *input, dx);
            }
            Op::Affine { input, scale } => {
                let a = *scale;
                self.accumulate(grads, *input, g.map(move |v| v * a));
            }
            Op::LogClamped { input, eps } => {
                let e = *eps;
                let x = self.value(*input);
                let dx = self.zip_grad(g, x, move |gv, xv| if xv > e { gv / xv } else { T::zero() });
                self.accumulate(grads, *input, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mean { input } => {
                let xs = self.shape(*input);
                let v = g.item() / T::of_f64(xs.numel() as f64);
                self.accumulate(grads, *input, Tensor::full(xs, v));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(g.item() * w));
                }
            }
        }
    }

    fn zip_grad(&self, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_vec(g.shape(), data).expect("shape preserved")
    }

    fn bias_grad(&self, g: &Tensor<T>, channels: usize) -> Tensor<T> {
        let gs = g.shape();
        let mut acc = vec![0.0f64; channels];
        for n in 0..gs.n {
            for (c, chunk) in g.sample(n).chunks(gs.plane()).enumerate() {
                acc[c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        Tensor::from_vec(
            Shape::new(1, channels, 1, 1),
            acc.into_iter().map(T::of_f64).collect(),
        )
        .expect("bias shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Checks d(loss)/d(leaf) for every leaf against central differences,
    /// where `build` maps the leaves to a scalar.
    fn check(leaves: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eval = |vals: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let loss = build(&mut tape, &vars);
            (tape.value(loss).item(), tape, vars, loss)
        };
        let (_, tape, vars, loss) = eval(&leaves);
        let grads = tape.backward(loss);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf gradient");
            for i in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[i] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[i] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-6 + 1e-5 * fd.abs(),
                    "leaf {li} elem {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    /// Random linear read-out so each output element carries a distinct weight.
    fn readout(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = random(tape.shape(v), &mut rng);
        let p = tape.leaf(probe, false);
        let prod = tape.add(v, p);
        let sq = tape.square(prod);
        tape.mean(sq)
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            random(Shape::new(2, 3, 6, 5), &mut rng),
            random(Shape::new(4, 3, 3, 3), &mut rng),
            random(Shape::new(1, 4, 1, 1), &mut rng),
        ];
        check(leaves, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            readout(t, y, 9)
        });
    }

    #[test]
    fn conv_transpose2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            random(Shape::new(2, 3, 3, 4), &mut rng),
            random(Shape::new(3, 2, 3, 3), &mut rng),
            random(Shape::new(1, 2, 1, 1), &mut rng),
        ];
        check(leaves, |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1);
            assert_eq!(t.shape(y), Shape::new(2, 2, 6, 8));
            readout(t, y, 10)
        });
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x, w), y> == <x, conv_transpose(y, w)> without bias.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Shape::new(1, 2, 8, 8), &mut rng);
        let w = random(Shape::new(3, 2, 3, 3), &mut rng);
        let y = random(Shape::new(1, 3, 4, 4), &mut rng);
        let mut t = Tape::new();
        let (xv, wv, yv) = (t.leaf(x.clone(), false), t.leaf(w, false), t.leaf(y.clone(), false));
        let cx = t.conv2d(xv, wv, None, 2, 1);
        let ty = t.conv_transpose2d(yv, wv, None, 2, 1, 1);
        let lhs: f64 = t.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(t.value(ty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pad_upsample_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![random(Shape::new(2, 2, 4, 5), &mut rng)];
        check(leaves, |t, v| {
            let p = t.reflect_pad(v[0], 2);
            let u = t.upsample_nearest(p, 2);
            let n = t.instance_norm(u, 1e-5);
            readout(t, n, 11)
        });
    }

    #[test]
    fn pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![random(Shape::new(1, 2, 3, 3), &mut rng), random(Shape::new(1, 2, 3, 3), &mut rng)];
        check(leaves, |t, v| {
            let a = t.leaky_relu(v[0], 0.2);
            let b = t.tanh(v[1]);
            let c = t.sub(a, b);
            let d = t.abs(c);
            let e = t.sigmoid(v[0]);
            let f = t.affine(e, -1.0, 1.0);
            let g = t.log_clamped(f, 1e-7);
            let r = t.relu(v[1]);
            let s = t.add(d, g);
            let s = t.add(s, r);
            let m1 = t.mean(s);
            let sq = t.square(v[0]);
            let m2 = t.mean(sq);
            t.weighted_sum(&[(m1, 1.5), (m2, -0.25)])
        });
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 0.5), true);
        let b = t.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 0.25), false);
        let c = t.sub(a, b);
        let m = t.mean(c);
        let g = t.backward(m);
        assert!(g.get(b).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn log_clamp_never_produces_nan() {
        let mut t = Tape::<f32>::new();
        let p = t.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 1.0, 0.5]).unwrap(), true);
        let l = t.log_clamped(p, 1e-7);
        assert!(t.value(l).all_finite());
        let m = t.mean(l);
        assert!(t.backward(m).get(p).unwrap().all_finite());
    }

    #[test]
    fn branch_fingerprint_tracks_kink_sides_only() {
        let fp = |v: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 3), v).unwrap(), false);
            let r = tape.relu(x);
            tape.abs(r);
            tape.branch_fingerprint()
        };
        let base = fp(vec![0.5, -0.2, 1.0]);
        assert_eq!(base, fp(vec![0.7, -0.9, 2.0]));
        assert_ne!(base, fp(vec![0.5, 0.2, 1.0]));
        assert_ne!(base, fp(vec![-0.5, -0.2, 1.0]));
    }
}
