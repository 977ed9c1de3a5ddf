//! Reverse-mode automatic differentiation over rank-4 tensors.
//!
//! A [`GradGraph`] is an append-only tape: executing an operation computes
//! its value eagerly and records the gradient rule. [`GradGraph::backward`]
//! walks the tape in reverse and accumulates (`+=`) gradients into every
//! slot that transitively requires them, so a tensor feeding several
//! consumers (the shared encoder feeding both decoders) receives the sum
//! of its downstream contributions. Repeated backward calls without
//! [`GradGraph::zero_grad`] keep accumulating.
//!
//! Long-lived parameters sit at the front of the tape; per-step
//! intermediates are discarded with [`GradGraph::truncate`]. A graph is
//! confined to one logical thread of execution.

use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;
// Elementwise helpers stay single-threaded: the buffers are small enough
// that fork overhead exceeds the work on the target core counts.

fn ew_unary<S: Scalar>(src: &[S], f: impl Fn(S) -> S) -> Vec<S> {
    src.iter().map(|&v| f(v)).collect()
}

fn ew_binary<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// d[i] += f(g[i]).
fn acc1<S: Scalar>(d: &mut [S], g: &[S], f: impl Fn(S) -> S) {
    for (o, &gv) in d.iter_mut().zip(g) {
        *o += f(gv);
    }
}

/// d[i] += f(g[i], h[i]).
fn acc2<S: Scalar>(d: &mut [S], g: &[S], h: &[S], f: impl Fn(S, S) -> S) {
    for ((o, &gv), &hv) in d.iter_mut().zip(g).zip(h) {
        *o += f(gv, hv);
    }
}

/// Handle to a tape slot. Only valid for the graph that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Fork point returned by [`GradGraph::mark`].
#[derive(Clone, Copy, Debug)]
pub struct GraphMark(usize);

// ops record their full definition even where backward does not need it
#[allow(dead_code)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Powf(Var, f64),
    Affine(Var, f64, f64),
    Clamp(Var, f64, f64),
    /// x:(n,c,h,w) scaled per channel by w:(1,c,1,1).
    ChannelMul(Var, Var),
    /// x:(n,c,h,w) shifted per channel by b:(1,c,1,1).
    ChannelAdd(Var, Var),
    /// x:(n,c,h,w) scaled per pixel by a:(n,1,h,w).
    SpatialMul(Var, Var),
    ConcatC(Vec<Var>),
    /// Concatenation along the first (batch / out-channel) axis.
    ConcatOuter(Vec<Var>),
    /// Channel-range view [c0, c0+cw) copied out of x.
    SliceC { x: Var, c0: usize, cw: usize },
    SumAll(Var),
    MeanAll(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    TConv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool2x2 { x: Var, argmax: Vec<u8> },
    BnTrain { x: Var, scale: Var, shift: Var, mean: Vec<S>, invstd: Vec<S> },
    BnEval { x: Var, scale: Var, shift: Var, mean: Vec<S>, invstd: Vec<S> },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Div(..) => "div",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Ln(..) => "ln",
            Op::Powf(..) => "powf",
            Op::Affine(..) => "affine",
            Op::Clamp(..) => "clamp",
            Op::ChannelMul(..) => "channel_mul",
            Op::ChannelAdd(..) => "channel_add",
            Op::SpatialMul(..) => "spatial_mul",
            Op::ConcatC(..) => "concat_channels",
            Op::ConcatOuter(..) => "concat_outer",
            Op::SliceC { .. } => "slice_channels",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Conv2d { .. } => "conv2d",
            Op::TConv2d { .. } => "tconv2d",
            Op::MaxPool2x2 { .. } => "maxpool2x2",
            Op::BnTrain { .. } => "batchnorm_train",
            Op::BnEval { .. } => "batchnorm_eval",
        }
    }
}

struct Slot<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    /// True when this slot lies on a path to a requires_grad leaf.
    needs_grad: bool,
    op: Op<S>,
}

pub struct GradGraph<S: Scalar> {
    slots: Vec<Slot<S>>,
    /// Reusable im2col buffer; graphs are confined to one thread.
    scratch: std::cell::RefCell<Vec<S>>,
}

impl<S: Scalar> Default for GradGraph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GradGraph<S> {
    pub fn new() -> Self {
        GradGraph { slots: Vec::new(), scratch: std::cell::RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        let id = u32::try_from(self.slots.len()).expect("graph slot count exceeds u32");
        self.slots.push(Slot { value, grad: None, requires_grad: false, needs_grad, op });
        Var(id)
    }

    fn needs(&self, v: Var) -> bool {
        self.slots[v.index()].needs_grad
    }

    /// Insert a constant (non-differentiated) tensor.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a trainable tensor: gradients will be accumulated for it.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.slots[v.index()].requires_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.slots[v.index()].value
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.slots[v.index()].value.data()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.slots[v.index()].value.shape()
    }

    /// Scalar payload of a (1,1,1,1) slot.
    pub fn scalar_value(&self, v: Var) -> S {
        let t = self.value(v);
        assert_eq!(t.shape(), Shape::scalar(), "expected scalar, got {}", t.shape());
        t.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.slots[v.index()].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.index()].requires_grad
    }

    /// Overwrite a leaf's data in place (parameter updates, finite-difference
    /// nudges). The shape is fixed.
    pub fn set_data(&mut self, v: Var, data: &[S]) {
        let t = &mut self.slots[v.index()].value;
        assert_eq!(data.len(), t.len(), "set_data length mismatch");
        t.data_mut().copy_from_slice(data);
    }

    pub fn data_mut(&mut self, v: Var) -> &mut [S] {
        self.slots[v.index()].value.data_mut()
    }

    pub fn set_grad(&mut self, v: Var, grad: Option<Vec<S>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.slots[v.index()].value.len());
        }
        self.slots[v.index()].grad = grad;
    }

    /// In-place SGD update: data -= lr * grad, then the grad is cleared.
    /// Returns false when the slot has no gradient.
    pub fn sgd_update(&mut self, v: Var, lr: f64) -> bool {
        let slot = &mut self.slots[v.index()];
        let Some(g) = slot.grad.take() else { return false };
        let lrs = S::from_f64(lr);
        for (d, gv) in slot.value.data_mut().iter_mut().zip(&g) {
            *d -= lrs * *gv;
        }
        true
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad = None;
        }
    }

    pub fn mark(&self) -> GraphMark {
        GraphMark(self.slots.len())
    }

    /// Drop every slot recorded after `mark`. Slots never reference later
    /// slots, so the survivors stay self-consistent.
    pub fn truncate(&mut self, mark: GraphMark) {
        assert!(mark.0 <= self.slots.len());
        self.slots.truncate(mark.0);
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_same_shape(&self, a: Var, b: Var, opname: &str) -> Shape {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{opname}: shape mismatch {sa} vs {sb}");
        sa
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let s = self.binary_same_shape(a, b, "add");
        let data = ew_binary(self.data(a), self.data(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(s, data), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let s = self.binary_same_shape(a, b, "sub");
        let data = ew_binary(self.data(a), self.data(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(s, data), Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let s = self.binary_same_shape(a, b, "hadamard");
        let data = ew_binary(self.data(a), self.data(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(s, data), Op::Hadamard(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let s = self.binary_same_shape(a, b, "div");
        let data = ew_binary(self.data(a), self.data(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(s, data), Op::Div(a, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let t = Tensor::from_vec(xs, ew_unary(self.data(x), |v| v.maxs(S::ZERO)));
        let ng = self.needs(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let t = Tensor::from_vec(xs, ew_unary(self.data(x), |v| v.sigmoid()));
        let ng = self.needs(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let t = Tensor::from_vec(xs, ew_unary(self.data(x), |v| v.tanh()));
        let ng = self.needs(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let t = Tensor::from_vec(xs, ew_unary(self.data(x), |v| v.ln()));
        let ng = self.needs(x);
        self.push(t, Op::Ln(x), ng)
    }

    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        let ev = S::from_f64(e);
        let xs = self.shape(x);
        let t = Tensor::from_vec(xs, ew_unary(self.data(x), |v| v.powf(ev)));
        let ng = self.needs(x);
        self.push(t, Op::Powf(x, e), ng)
    }

    /// mul * x + add, with f64 constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let (m, a) = (S::from_f64(mul), S::from_f64(add));
        let xs = self.shape(x);
        let t = Tensor::from_vec(xs, ew_unary(self.data(x), |v| m * v + a));
        let ng = self.needs(x);
        self.push(t, Op::Affine(x, mul, add), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let xs = self.shape(x);
        let t = Tensor::from_vec(xs, ew_unary(self.data(x), |v| v.maxs(l).mins(h)));
        let ng = self.needs(x);
        self.push(t, Op::Clamp(x, lo, hi), ng)
    }

    pub fn channel_mul(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert!(
            ws.n == 1 && ws.h == 1 && ws.w == 1 && ws.c == xs.c,
            "channel_mul: weight {ws} incompatible with input {xs}"
        );
        let hw = xs.hw();
        let wd = self.data(w);
        let mut data = Vec::with_capacity(xs.len());
        for (p, chunk) in self.data(x).chunks(hw).enumerate() {
            let wv = wd[p % xs.c];
            data.extend(chunk.iter().map(|&v| v * wv));
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(Tensor::from_vec(xs, data), Op::ChannelMul(x, w), ng)
    }

    pub fn channel_add(&mut self, x: Var, b: Var) -> Var {
        let (xs, bs) = (self.shape(x), self.shape(b));
        assert!(
            bs.n == 1 && bs.h == 1 && bs.w == 1 && bs.c == xs.c,
            "channel_add: bias {bs} incompatible with input {xs}"
        );
        let hw = xs.hw();
        let bd = self.data(b);
        let mut data = Vec::with_capacity(xs.len());
        for (p, chunk) in self.data(x).chunks(hw).enumerate() {
            let bv = bd[p % xs.c];
            data.extend(chunk.iter().map(|&v| v + bv));
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Tensor::from_vec(xs, data), Op::ChannelAdd(x, b), ng)
    }

    /// Broadcast a single-channel coefficient map over all channels of x.
    pub fn spatial_mul(&mut self, x: Var, a: Var) -> Var {
        let (xs, as_) = (self.shape(x), self.shape(a));
        assert!(
            as_.n == xs.n && as_.c == 1 && as_.h == xs.h && as_.w == xs.w,
            "spatial_mul: coefficient map {as_} incompatible with input {xs}"
        );
        let hw = xs.hw();
        let ad = self.data(a);
        let xd = self.data(x);
        let mut data = vec![S::ZERO; xs.len()];
        for n in 0..xs.n {
            let arow = &ad[n * hw..(n + 1) * hw];
            for c in 0..xs.c {
                let base = (n * xs.c + c) * hw;
                for ((o, &xv), &av) in
                    data[base..base + hw].iter_mut().zip(&xd[base..base + hw]).zip(arow)
                {
                    *o = xv * av;
                }
            }
        }
        let ng = self.needs(x) || self.needs(a);
        self.push(Tensor::from_vec(xs, data), Op::SpatialMul(x, a), ng)
    }

    // ---- structure -------------------------------------------------------

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let s0 = self.shape(parts[0]);
        let mut c = 0;
        for &p in parts {
            let sp = self.shape(p);
            assert!(
                sp.same_spatial(&s0),
                "concat_channels: spatial mismatch {sp} vs {s0}"
            );
            c += sp.c;
        }
        let os = Shape::new(s0.n, c, s0.h, s0.w);
        let mut data = Vec::with_capacity(os.len());
        for n in 0..s0.n {
            for &p in parts {
                let sp = self.shape(p);
                let chw = sp.chw();
                data.extend_from_slice(&self.data(p)[n * chw..(n + 1) * chw]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(os, data), Op::ConcatC(parts.to_vec()), ng)
    }

    /// Concatenate along the first axis (stacking conv kernels by output
    /// channel, or batches); the remaining extents must agree. Row-major
    /// layout makes this a plain buffer concatenation.
    pub fn concat_outer(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_outer: no inputs");
        let s0 = self.shape(parts[0]);
        let mut n = 0;
        let mut data = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            assert!(
                (sp.c, sp.h, sp.w) == (s0.c, s0.h, s0.w),
                "concat_outer: trailing extents differ, {sp} vs {s0}"
            );
            n += sp.n;
            data.extend_from_slice(self.data(p));
        }
        let os = Shape::new(n, s0.c, s0.h, s0.w);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(os, data), Op::ConcatOuter(parts.to_vec()), ng)
    }

    /// Copy out the channel range [c0, c0+cw).
    pub fn slice_channels(&mut self, x: Var, c0: usize, cw: usize) -> Var {
        let xs = self.shape(x);
        assert!(
            c0 + cw <= xs.c && cw > 0,
            "slice_channels: range {c0}..{} out of {xs}",
            c0 + cw
        );
        let os = Shape::new(xs.n, cw, xs.h, xs.w);
        let hw = xs.hw();
        let xd = self.data(x);
        let mut data = Vec::with_capacity(os.len());
        for n in 0..xs.n {
            let start = xs.idx(n, c0, 0, 0);
            data.extend_from_slice(&xd[start..start + cw * hw]);
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(os, data), Op::SliceC { x, c0, cw }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.data(x) {
            acc += v;
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(Shape::scalar(), vec![acc]), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.data(x).len();
        assert!(len > 0, "mean_all over empty tensor");
        let mut acc = S::ZERO;
        for &v in self.data(x) {
            acc += v;
        }
        let mean = acc * S::from_f64(1.0 / len as f64);
        let ng = self.needs(x);
        self.push(Tensor::from_vec(Shape::scalar(), vec![mean]), Op::MeanAll(x), ng)
    }

    // ---- spatial ops ------------------------------------------------------

    /// Cross-correlation with dilation; `w` is (out_ch, in_ch, kh, kw),
    /// optional bias is (1, out_ch, 1, 1).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let os = kernels::conv2d_out_shape(xs, ws, geom);
        if let Some(b) = b {
            let bs = self.shape(b);
            assert!(
                bs.n == 1 && bs.h == 1 && bs.w == 1 && bs.c == ws.n,
                "conv2d: bias {bs} incompatible with kernel {ws}"
            );
        }
        let mut out = vec![S::ZERO; os.len()];
        kernels::conv2d_fwd(
            self.data(x),
            xs,
            self.data(w),
            ws,
            b.map(|b| self.data(b)),
            geom,
            &mut out,
            os,
            &mut self.scratch.borrow_mut(),
        );
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(Tensor::from_vec(os, out), Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Transposed convolution; `w` is (in_ch, out_ch, kh, kw).
    pub fn tconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let os = kernels::tconv2d_out_shape(xs, ws, stride, pad);
        if let Some(b) = b {
            let bs = self.shape(b);
            assert!(
                bs.n == 1 && bs.h == 1 && bs.w == 1 && bs.c == ws.c,
                "tconv2d: bias {bs} incompatible with kernel {ws}"
            );
        }
        let mut out = vec![S::ZERO; os.len()];
        kernels::tconv2d_fwd(
            self.data(x),
            xs,
            self.data(w),
            ws,
            b.map(|b| self.data(b)),
            stride,
            pad,
            &mut out,
            os,
        );
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(Tensor::from_vec(os, out), Op::TConv2d { x, w, b, stride, pad }, ng)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        assert!(
            xs.h % 2 == 0 && xs.w % 2 == 0,
            "maxpool2x2: spatial extents must be even, got {xs}"
        );
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let mut out = vec![S::ZERO; os.len()];
        let mut argmax = vec![0u8; os.len()];
        kernels::maxpool2x2_fwd(self.data(x), xs, &mut out, &mut argmax);
        let ng = self.needs(x);
        self.push(Tensor::from_vec(os, out), Op::MaxPool2x2 { x, argmax }, ng)
    }

    /// Batch-normalize with batch statistics; returns the output plus the
    /// per-channel batch mean/var so the caller can update running buffers.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> (Var, Vec<S>, Vec<S>) {
        let xs = self.shape(x);
        let m = xs.n * xs.hw();
        assert!(m >= 2, "batchnorm_train: needs at least 2 values per channel, got {m} ({xs})");
        for (v, name) in [(scale, "scale"), (shift, "shift")] {
            let s = self.shape(v);
            assert!(
                s.n == 1 && s.h == 1 && s.w == 1 && s.c == xs.c,
                "batchnorm: {name} {s} incompatible with input {xs}"
            );
        }
        let (mean, var) = kernels::channel_stats(self.data(x), xs);
        let epss = S::from_f64(eps);
        let invstd: Vec<S> = var.iter().map(|&v| S::ONE / (v + epss).sqrt()).collect();
        let hw = xs.hw();
        let xd = self.data(x);
        let sd = self.data(scale);
        let bd = self.data(shift);
        let mut out = vec![S::ZERO; xs.len()];
        for p in 0..xs.n * xs.c {
            let c = p % xs.c;
            let (mu, is, sc, sh) = (mean[c], invstd[c], sd[c], bd[c]);
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(&xd[p * hw..(p + 1) * hw]) {
                *o = (v - mu) * is * sc + sh;
            }
        }
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        let v = self.push(
            Tensor::from_vec(xs, out),
            Op::BnTrain { x, scale, shift, mean: mean.clone(), invstd },
            ng,
        );
        (v, mean, var)
    }

    /// Batch-normalize with frozen running statistics: a per-channel affine map.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Var {
        let xs = self.shape(x);
        assert_eq!(running_mean.len(), xs.c, "batchnorm_eval: running mean length");
        assert_eq!(running_var.len(), xs.c, "batchnorm_eval: running var length");
        let epss = S::from_f64(eps);
        let invstd: Vec<S> = running_var.iter().map(|&v| S::ONE / (v + epss).sqrt()).collect();
        let hw = xs.hw();
        let xd = self.data(x);
        let sd = self.data(scale);
        let bd = self.data(shift);
        let mut out = vec![S::ZERO; xs.len()];
        for p in 0..xs.n * xs.c {
            let c = p % xs.c;
            let (mu, is, sc, sh) = (running_mean[c], invstd[c], sd[c], bd[c]);
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(&xd[p * hw..(p + 1) * hw]) {
                *o = (v - mu) * is * sc + sh;
            }
        }
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(
            Tensor::from_vec(xs, out),
            Op::BnEval { x, scale, shift, mean: running_mean.to_vec(), invstd },
            ng,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients for every slot on a requires_grad path reachable
    /// from `loss`. `loss` must be scalar-shaped. Accumulates into existing
    /// gradients.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.shape(loss),
            Shape::scalar(),
            "backward: loss must be scalar (1,1,1,1), got {}",
            self.shape(loss)
        );
        let n = self.slots.len();
        // Leaf gradients accumulate across calls; intermediate slots carry
        // only the current pass (a stale intermediate grad would be
        // re-propagated and double-counted).
        let mut grads: Vec<Option<Vec<S>>> = self
            .slots
            .iter_mut()
            .map(|s| if s.requires_grad { s.grad.take() } else { s.grad.take().and(None) })
            .collect();
        {
            let g = grads[loss.index()].get_or_insert_with(|| vec![S::ZERO; 1]);
            g[0] += S::ONE;
        }
        for i in (0..n).rev() {
            if !self.slots[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (s, g) in self.slots.iter_mut().zip(grads) {
            s.grad = g;
        }
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut sink = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.needs(v) {
                return;
            }
            let slot = grads[v.index()].get_or_insert_with(|| vec![S::ZERO; self.value(v).len()]);
            f(slot);
        };
        match &self.slots[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink(*a, &mut |d| acc1(d, g, |gv| gv));
                sink(*b, &mut |d| acc1(d, g, |gv| gv));
            }
            Op::Sub(a, b) => {
                sink(*a, &mut |d| acc1(d, g, |gv| gv));
                sink(*b, &mut |d| acc1(d, g, |gv| -gv));
            }
            Op::Hadamard(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                sink(*a, &mut |d| acc2(d, g, bd, |gv, bv| gv * bv));
                sink(*b, &mut |d| acc2(d, g, ad, |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                sink(*a, &mut |d| {
                    for ((o, &gv), &bv) in d.iter_mut().zip(g).zip(bd) {
                        *o += gv / bv;
                    }
                });
                sink(*b, &mut |d| {
                    for (((o, &gv), &av), &bv) in d.iter_mut().zip(g).zip(ad).zip(bd) {
                        *o -= gv * av / (bv * bv);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                sink(*x, &mut |d| {
                    acc2(d, g, xd, |gv, xv| if xv > S::ZERO { gv } else { S::ZERO })
                });
            }
            Op::Sigmoid(x) => {
                let yd = self.slots[i].value.data();
                sink(*x, &mut |d| acc2(d, g, yd, |gv, s| gv * s * (S::ONE - s)));
            }
            Op::Tanh(x) => {
                let yd = self.slots[i].value.data();
                sink(*x, &mut |d| acc2(d, g, yd, |gv, t| gv * (S::ONE - t * t)));
            }
            Op::Ln(x) => {
                let xd = self.data(*x);
                sink(*x, &mut |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *o += gv / xv;
                    }
                });
            }
            Op::Powf(x, e) => {
                let xd = self.data(*x);
                let (es, em1) = (S::from_f64(*e), S::from_f64(*e - 1.0));
                sink(*x, &mut |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *o += gv * es * xv.powf(em1);
                    }
                });
            }
            Op::Affine(x, m, _) => {
                let ms = S::from_f64(*m);
                sink(*x, &mut |d| {
                    for (o, &gv) in d.iter_mut().zip(g) {
                        *o += gv * ms;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.data(*x);
                let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
                sink(*x, &mut |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        if xv > l && xv < h {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ChannelMul(x, w) => {
                let xs = self.shape(*x);
                let hw = xs.hw();
                let (xd, wd) = (self.data(*x), self.data(*w));
                sink(*x, &mut |d| {
                    for (p, (dc, gc)) in d.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let wv = wd[p % xs.c];
                        for (o, &gv) in dc.iter_mut().zip(gc) {
                            *o += gv * wv;
                        }
                    }
                });
                sink(*w, &mut |d| {
                    for (p, (xc, gc)) in xd.chunks(hw).zip(g.chunks(hw)).enumerate() {
                        let mut acc = S::ZERO;
                        for (&xv, &gv) in xc.iter().zip(gc) {
                            acc += xv * gv;
                        }
                        d[p % xs.c] += acc;
                    }
                });
            }
            Op::ChannelAdd(x, b) => {
                let xs = self.shape(*x);
                let hw = xs.hw();
                sink(*x, &mut |d| {
                    for (o, &gv) in d.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                sink(*b, &mut |d| {
                    for (p, gc) in g.chunks(hw).enumerate() {
                        let mut acc = S::ZERO;
                        for &gv in gc {
                            acc += gv;
                        }
                        d[p % xs.c] += acc;
                    }
                });
            }
            Op::SpatialMul(x, a) => {
                let xs = self.shape(*x);
                let hw = xs.hw();
                let (xd, ad) = (self.data(*x), self.data(*a));
                sink(*x, &mut |d| {
                    for n in 0..xs.n {
                        let arow = &ad[n * hw..(n + 1) * hw];
                        for c in 0..xs.c {
                            let base = (n * xs.c + c) * hw;
                            for ((o, &gv), &av) in
                                d[base..base + hw].iter_mut().zip(&g[base..base + hw]).zip(arow)
                            {
                                *o += gv * av;
                            }
                        }
                    }
                });
                sink(*a, &mut |d| {
                    for n in 0..xs.n {
                        let drow = &mut d[n * hw..(n + 1) * hw];
                        for c in 0..xs.c {
                            let base = (n * xs.c + c) * hw;
                            for ((o, &gv), &xv) in
                                drow.iter_mut().zip(&g[base..base + hw]).zip(&xd[base..base + hw])
                            {
                                *o += gv * xv;
                            }
                        }
                    }
                });
            }
            Op::ConcatC(parts) => {
                let os = self.slots[i].value.shape();
                let ohw = os.hw();
                let mut c0 = 0;
                for &p in parts {
                    let sp = self.shape(p);
                    let chw = sp.chw();
                    sink(p, &mut |d| {
                        for n in 0..os.n {
                            let src = &g[(n * os.c + c0) * ohw..(n * os.c + c0 + sp.c) * ohw];
                            for (o, &gv) in d[n * chw..(n + 1) * chw].iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                    });
                    c0 += sp.c;
                }
            }
            Op::ConcatOuter(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    sink(p, &mut |d| {
                        for (o, &gv) in d.iter_mut().zip(&g[start..start + len]) {
                            *o += gv;
                        }
                    });
                    start += len;
                }
            }
            Op::SliceC { x, c0, cw } => {
                let xs = self.shape(*x);
                let hw = xs.hw();
                sink(*x, &mut |d| {
                    for n in 0..xs.n {
                        let dst = &mut d[xs.idx(n, *c0, 0, 0)..][..cw * hw];
                        let src = &g[n * cw * hw..(n + 1) * cw * hw];
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                sink(*x, &mut |d| {
                    for o in d.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).len();
                let gv = g[0] * S::from_f64(1.0 / len as f64);
                sink(*x, &mut |d| {
                    for o in d.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let os = self.slots[i].value.shape();
                sink(*x, &mut |d| {
                    kernels::conv2d_dx(
                        g,
                        os,
                        self.data(*w),
                        ws,
                        *geom,
                        d,
                        xs,
                        &mut self.scratch.borrow_mut(),
                    );
                });
                sink(*w, &mut |d| {
                    kernels::conv2d_dw_db(
                        self.data(*x),
                        xs,
                        g,
                        os,
                        ws,
                        *geom,
                        d,
                        None,
                        &mut self.scratch.borrow_mut(),
                    );
                });
                if let Some(b) = b {
                    sink(*b, &mut |d| {
                        let ohw = os.hw();
                        for oc in 0..os.c {
                            let mut acc = S::ZERO;
                            for n in 0..os.n {
                                let base = (n * os.c + oc) * ohw;
                                for &gv in &g[base..base + ohw] {
                                    acc += gv;
                                }
                            }
                            d[oc] += acc;
                        }
                    });
                }
            }
            Op::TConv2d { x, w, b, stride, pad } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let os = self.slots[i].value.shape();
                sink(*x, &mut |d| {
                    kernels::tconv2d_dx(g, os, self.data(*w), ws, *stride, *pad, d, xs);
                });
                sink(*w, &mut |d| {
                    kernels::tconv2d_dw_db(
                        self.data(*x),
                        xs,
                        g,
                        os,
                        ws,
                        *stride,
                        *pad,
                        d,
                        None,
                    );
                });
                if let Some(b) = b {
                    sink(*b, &mut |d| {
                        let ohw = os.hw();
                        for oc in 0..os.c {
                            let mut acc = S::ZERO;
                            for n in 0..os.n {
                                let base = (n * os.c + oc) * ohw;
                                for &gv in &g[base..base + ohw] {
                                    acc += gv;
                                }
                            }
                            d[oc] += acc;
                        }
                    });
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let xs = self.shape(*x);
                let os = self.slots[i].value.shape();
                sink(*x, &mut |d| {
                    kernels::maxpool2x2_bwd(g, os, argmax, d, xs);
                });
            }
            Op::BnTrain { x, scale, shift, mean, invstd } => {
                let xs = self.shape(*x);
                let hw = xs.hw();
                let m = (xs.n * hw) as f64;
                let xd = self.data(*x);
                let sd = self.data(*scale);
                // per-channel reductions: s1 = sum(g), s2 = sum(g * xhat)
                let mut s1 = vec![S::ZERO; xs.c];
                let mut s2 = vec![S::ZERO; xs.c];
                for p in 0..xs.n * xs.c {
                    let c = p % xs.c;
                    let (mu, is) = (mean[c], invstd[c]);
                    let mut a1 = S::ZERO;
                    let mut a2 = S::ZERO;
                    for (&gv, &xv) in g[p * hw..(p + 1) * hw].iter().zip(&xd[p * hw..(p + 1) * hw])
                    {
                        a1 += gv;
                        a2 += gv * (xv - mu) * is;
                    }
                    s1[c] += a1;
                    s2[c] += a2;
                }
                sink(*shift, &mut |d| {
                    for (o, &v) in d.iter_mut().zip(&s1) {
                        *o += v;
                    }
                });
                sink(*scale, &mut |d| {
                    for (o, &v) in d.iter_mut().zip(&s2) {
                        *o += v;
                    }
                });
                sink(*x, &mut |d| {
                    let minv = S::from_f64(1.0 / m);
                    for p in 0..xs.n * xs.c {
                        let c = p % xs.c;
                        let (mu, is, sc) = (mean[c], invstd[c], sd[c]);
                        let (m1, m2) = (s1[c] * minv, s2[c] * minv);
                        for ((o, &gv), &xv) in d[p * hw..(p + 1) * hw]
                            .iter_mut()
                            .zip(&g[p * hw..(p + 1) * hw])
                            .zip(&xd[p * hw..(p + 1) * hw])
                        {
                            let xhat = (xv - mu) * is;
                            *o += sc * is * (gv - m1 - xhat * m2);
                        }
                    }
                });
            }
            Op::BnEval { x, scale, shift, mean, invstd } => {
                let xs = self.shape(*x);
                let hw = xs.hw();
                let xd = self.data(*x);
                let sd = self.data(*scale);
                sink(*x, &mut |d| {
                    for p in 0..xs.n * xs.c {
                        let c = p % xs.c;
                        let k = sd[c] * invstd[c];
                        for (o, &gv) in
                            d[p * hw..(p + 1) * hw].iter_mut().zip(&g[p * hw..(p + 1) * hw])
                        {
                            *o += gv * k;
                        }
                    }
                });
                sink(*scale, &mut |d| {
                    for p in 0..xs.n * xs.c {
                        let c = p % xs.c;
                        let (mu, is) = (mean[c], invstd[c]);
                        let mut acc = S::ZERO;
                        for (&gv, &xv) in
                            g[p * hw..(p + 1) * hw].iter().zip(&xd[p * hw..(p + 1) * hw])
                        {
                            acc += gv * (xv - mu) * is;
                        }
                        d[c] += acc;
                    }
                });
                sink(*shift, &mut |d| {
                    for p in 0..xs.n * xs.c {
                        let c = p % xs.c;
                        let mut acc = S::ZERO;
                        for &gv in &g[p * hw..(p + 1) * hw] {
                            acc += gv;
                        }
                        d[c] += acc;
                    }
                });
            }
        }
    }

    /// Name of the op that produced a slot (for diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.slots[v.index()].op.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn t1<S: Scalar>(vals: &[f64]) -> Tensor<S> {
        Tensor::from_vec(
            Shape::new(1, 1, 1, vals.len()),
            vals.iter().map(|&v| S::from_f64(v)).collect(),
        )
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let x = g.leaf(t1(&[0.0]));
        let y = g.sigmoid(x);
        assert_eq!(g.data(y), &[0.5]);
    }

    #[test]
    fn hadamard_is_pointwise_product() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let a = g.leaf(t1(&[0.8]));
        let b = g.leaf(t1(&[0.5]));
        let y = g.hadamard(a, b);
        assert!((g.data(y)[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let x = g.leaf(t1(&[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 2.0]);
    }

    #[test]
    fn hadamard_backward_is_product_rule() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let a = g.param(t1(&[1.0, 2.0, 3.0]));
        let b = g.param(t1(&[4.0, 5.0, 6.0]));
        let h = g.hadamard(a, b);
        let loss = g.sum_all(h);
        g.backward(loss);
        assert_eq!(g.grad(a).unwrap(), g.data(b));
        assert_eq!(g.grad(b).unwrap(), g.data(a));
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let x = g.param(t1(&[0.0, 0.0]));
        let s = g.sigmoid(x);
        let loss = g.sum_all(s);
        g.backward(loss);
        for &gv in g.grad(x).unwrap() {
            assert!((gv - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let x = g.param(t1(&[3.0]));
        let loss = g.sum_all(x);
        g.backward(loss);
        g.backward(loss);
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
        g.zero_grad();
        g.backward(loss);
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn fanout_accumulates_both_paths() {
        // loss = sum(x*x_const + x) -> dx = c + 1
        let mut g: GradGraph<f64> = GradGraph::new();
        let x = g.param(t1(&[2.0]));
        let c = g.leaf(t1(&[5.0]));
        let prod = g.hadamard(x, c);
        let s = g.add(prod, x);
        let loss = g.sum_all(s);
        g.backward(loss);
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // constants are not differentiated
        assert!(g.grad(c).is_none());
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_shape_mismatch_names_shapes() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let a = g.leaf(t1(&[1.0]));
        let b = g.leaf(t1(&[1.0, 2.0]));
        g.add(a, b);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn non_scalar_backward_is_rejected() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let x = g.param(t1(&[1.0, 2.0]));
        g.backward(x);
    }

    #[test]
    fn concat_channel_arithmetic_and_identity() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let a = g.leaf(Tensor::create(Shape::new(1, 2, 4, 4), Init::Constant(1.0)).unwrap());
        let b = g.leaf(Tensor::create(Shape::new(1, 3, 4, 4), Init::Constant(2.0)).unwrap());
        let cat = g.concat_channels(&[a, b]);
        assert_eq!(g.shape(cat), Shape::new(1, 5, 4, 4));
        let one = g.concat_channels(&[a]);
        assert_eq!(g.value(one).data(), g.value(a).data());
    }

    #[test]
    fn concat_backward_splits_ones() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let a = g.param(Tensor::create(Shape::new(2, 2, 3, 3), Init::Constant(0.5)).unwrap());
        let b = g.param(Tensor::create(Shape::new(2, 1, 3, 3), Init::Constant(0.5)).unwrap());
        let cat = g.concat_channels(&[a, b]);
        let loss = g.sum_all(cat);
        g.backward(loss);
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_then_split_round_trips() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let a = g.leaf(
            Tensor::create(Shape::new(2, 2, 3, 3), Init::Normal { mean: 0.0, std: 1.0, seed: 1 })
                .unwrap(),
        );
        let b = g.leaf(
            Tensor::create(Shape::new(2, 3, 3, 3), Init::Normal { mean: 0.0, std: 1.0, seed: 2 })
                .unwrap(),
        );
        let cat = g.concat_channels(&[a, b]);
        let parts = g.value(cat).split_channels(&[2, 3]);
        assert_eq!(parts[0], *g.value(a));
        assert_eq!(parts[1], *g.value(b));
    }

    #[test]
    fn truncate_keeps_parameters_and_their_grads() {
        let mut g: GradGraph<f64> = GradGraph::new();
        let p = g.param(t1(&[1.0, 2.0]));
        let mark = g.mark();
        let s = g.sigmoid(p);
        let loss = g.sum_all(s);
        g.backward(loss);
        assert!(g.grad(p).is_some());
        g.truncate(mark);
        assert_eq!(g.len(), 1);
        assert!(g.grad(p).is_some());
        // the graph can be reused for a new step
        let s2 = g.sigmoid(p);
        let loss2 = g.sum_all(s2);
        g.backward(loss2);
    }

    #[test]
    fn joint_product_gradient_interaction() {
        // s = sum(y1 .* y2) => ds/dy1 = y2, ds/dy2 = y1
        let mut g: GradGraph<f64> = GradGraph::new();
        let y1 = g.param(t1(&[0.2, 0.7, 0.9]));
        let y2 = g.param(t1(&[0.5, 0.1, 0.8]));
        let j = g.hadamard(y1, y2);
        let s = g.sum_all(j);
        g.backward(s);
        assert_eq!(g.grad(y1).unwrap(), g.data(y2));
        assert_eq!(g.grad(y2).unwrap(), g.data(y1));
    }
}
