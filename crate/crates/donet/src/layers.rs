//! Differentiable layer primitives over [`GradGraph`]: dilated/strided
//! convolution, transposed convolution, batch normalization, the ConvLSTM
//! cell and the additive attention gate.
//!
//! Layers hold tape slots for their parameters plus hyperparameters; the
//! owning graph must outlive them. Weight init is fan-in-scaled normal
//! (std = sqrt(2/fan_in)), biases start at zero except the LSTM forget
//! gate bias which starts at 1.

use crate::graph::{GradGraph, Var};
use crate::kernels::ConvGeom;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

pub type ParamList = Vec<(String, Var)>;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        g: &mut GradGraph<S>,
        rng: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = g.param(Tensor::normal_from(Shape::new(out_ch, in_ch, k, k), rng, 0.0, std));
        let bias = bias.then(|| g.param(Tensor::zeros(Shape::new(1, out_ch, 1, 1))));
        Conv2d { weight, bias, geom, in_ch, out_ch, k }
    }

    /// 3x3 "same" convolution with the given dilation rate.
    pub fn same3x3<S: Scalar>(
        g: &mut GradGraph<S>,
        rng: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        dil: usize,
    ) -> Self {
        Conv2d::new(g, rng, in_ch, out_ch, 3, ConvGeom::same(3, dil), true)
    }

    pub fn forward<S: Scalar>(&self, g: &mut GradGraph<S>, x: Var) -> Var {
        g.conv2d(x, self.weight, self.bias, self.geom)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight));
        if let Some(b) = self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

#[derive(Clone, Debug)]
pub struct TConv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl TConv2d {
    pub fn new<S: Scalar>(
        g: &mut GradGraph<S>,
        rng: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = g.param(Tensor::normal_from(Shape::new(in_ch, out_ch, k, k), rng, 0.0, std));
        let bias = bias.then(|| g.param(Tensor::zeros(Shape::new(1, out_ch, 1, 1))));
        TConv2d { weight, bias, stride, pad, in_ch, out_ch, k }
    }

    pub fn forward<S: Scalar>(&self, g: &mut GradGraph<S>, x: Var) -> Var {
        g.tconv2d(x, self.weight, self.bias, self.stride, self.pad)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight));
        if let Some(b) = self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

/// Batch normalization with running statistics. Train mode normalizes with
/// batch statistics and updates the running buffers; eval mode is a frozen
/// per-channel affine map.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<S: Scalar> {
    pub scale: Var,
    pub shift: Var,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: f64,
    pub eps: f64,
    pub ch: usize,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(g: &mut GradGraph<S>, ch: usize) -> Self {
        let scale = g.param(Tensor::constant(Shape::new(1, ch, 1, 1), 1.0));
        let shift = g.param(Tensor::zeros(Shape::new(1, ch, 1, 1)));
        BatchNorm2d {
            scale,
            shift,
            running_mean: vec![S::ZERO; ch],
            running_var: vec![S::ONE; ch],
            momentum: 0.1,
            eps: 1e-5,
            ch,
        }
    }

    pub fn forward(&mut self, g: &mut GradGraph<S>, x: Var, mode: Mode) -> Var {
        match mode {
            Mode::Train => {
                let xs = g.shape(x);
                let m = (xs.n * xs.hw()) as f64;
                let (y, mean, var) = g.batchnorm_train(x, self.scale, self.shift, self.eps);
                // running variance uses the unbiased estimate
                let corr = S::from_f64(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
                let mom = S::from_f64(self.momentum);
                let keep = S::from_f64(1.0 - self.momentum);
                for c in 0..self.ch {
                    self.running_mean[c] = keep * self.running_mean[c] + mom * mean[c];
                    self.running_var[c] = keep * self.running_var[c] + mom * var[c] * corr;
                }
                y
            }
            Mode::Eval => g.batchnorm_eval(
                x,
                self.scale,
                self.shift,
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.scale"), self.scale));
        out.push((format!("{prefix}.shift"), self.shift));
    }

    /// Named running-statistic buffers for checkpointing.
    pub fn buffers(&self, prefix: &str) -> Vec<(String, Vec<S>)> {
        vec![
            (format!("{prefix}.running_mean"), self.running_mean.clone()),
            (format!("{prefix}.running_var"), self.running_var.clone()),
        ]
    }

    pub fn set_buffer(&mut self, name: &str, data: &[S]) -> bool {
        if data.len() != self.ch {
            return false;
        }
        if let Some(stripped) = name.strip_suffix(".running_mean") {
            let _ = stripped;
            self.running_mean.copy_from_slice(data);
            true
        } else if name.ends_with(".running_var") {
            self.running_var.copy_from_slice(data);
            true
        } else {
            false
        }
    }
}

/// ConvLSTM cell: gate transforms are 3x3 "same" convolutions, cell-state
/// peepholes are learned per-channel maps applied with a Hadamard product.
///
/// i = sig(Wfi*F + Whi*H + Wci o C + bi)
/// f = sig(Wff*F + Whf*H + Wcf o C + bf)
/// C' = f o C + i o tanh(Wfc*F + Whc*H + bc)
/// o = sig(Wfo*F + Who*H + Wco o C' + bo)
/// H' = o o tanh(C')
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub w_fi: Conv2d,
    pub w_hi: Conv2d,
    pub w_ff: Conv2d,
    pub w_hf: Conv2d,
    pub w_fc: Conv2d,
    pub w_hc: Conv2d,
    pub w_fo: Conv2d,
    pub w_ho: Conv2d,
    pub w_ci: Var,
    pub w_cf: Var,
    pub w_co: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_c: Var,
    pub b_o: Var,
    pub in_ch: usize,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<S: Scalar>(
        g: &mut GradGraph<S>,
        rng: &mut Rng,
        in_ch: usize,
        hidden: usize,
    ) -> Self {
        let geom = ConvGeom::same(3, 1);
        let conv =
            |g: &mut GradGraph<S>, rng: &mut Rng, ic| Conv2d::new(g, rng, ic, hidden, 3, geom, false);
        let w_fi = conv(g, rng, in_ch);
        let w_hi = conv(g, rng, hidden);
        let w_ff = conv(g, rng, in_ch);
        let w_hf = conv(g, rng, hidden);
        let w_fc = conv(g, rng, in_ch);
        let w_hc = conv(g, rng, hidden);
        let w_fo = conv(g, rng, in_ch);
        let w_ho = conv(g, rng, hidden);
        let pshape = Shape::new(1, hidden, 1, 1);
        let w_ci = g.param(Tensor::zeros(pshape));
        let w_cf = g.param(Tensor::zeros(pshape));
        let w_co = g.param(Tensor::zeros(pshape));
        let b_i = g.param(Tensor::zeros(pshape));
        // forget-gate bias starts open
        let b_f = g.param(Tensor::constant(pshape, 1.0));
        let b_c = g.param(Tensor::zeros(pshape));
        let b_o = g.param(Tensor::zeros(pshape));
        ConvLstmCell {
            w_fi,
            w_hi,
            w_ff,
            w_hf,
            w_fc,
            w_hc,
            w_fo,
            w_ho,
            w_ci,
            w_cf,
            w_co,
            b_i,
            b_f,
            b_c,
            b_o,
            in_ch,
            hidden,
        }
    }

    /// Zero initial state for a given input resolution.
    pub fn zero_state<S: Scalar>(&self, g: &mut GradGraph<S>, n: usize, h: usize, w: usize) -> (Var, Var) {
        let z = Tensor::zeros(Shape::new(n, self.hidden, h, w));
        (g.leaf(z.clone()), g.leaf(z))
    }

    /// First step from the all-zero state: the hidden-path convolutions and
    /// cell peepholes vanish, so they are skipped. Value-identical to
    /// [`ConvLstmCell::step`] on explicit zero tensors.
    pub fn step_from_zero<S: Scalar>(&self, g: &mut GradGraph<S>, f_t: Var) -> (Var, Var) {
        let ch = self.hidden;
        let wf = g.concat_outer(&[self.w_fi.weight, self.w_fc.weight, self.w_fo.weight]);
        let pre = g.conv2d(f_t, wf, None, self.w_fi.geom);

        let i_pre = g.slice_channels(pre, 0, ch);
        let i_pre = g.channel_add(i_pre, self.b_i);
        let i_t = g.sigmoid(i_pre);
        let c_pre = g.slice_channels(pre, ch, ch);
        let c_pre = g.channel_add(c_pre, self.b_c);
        let c_cand = g.tanh(c_pre);
        let c_t = g.hadamard(i_t, c_cand);

        let o_pre = g.slice_channels(pre, 2 * ch, ch);
        let peep = g.channel_mul(c_t, self.w_co);
        let o_pre = g.add(o_pre, peep);
        let o_pre = g.channel_add(o_pre, self.b_o);
        let o_t = g.sigmoid(o_pre);
        let c_act = g.tanh(c_t);
        let h_t = g.hadamard(o_t, c_act);
        (h_t, c_t)
    }

    pub fn step<S: Scalar>(
        &self,
        g: &mut GradGraph<S>,
        f_t: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> (Var, Var) {
        let fs = g.shape(f_t);
        let hs = g.shape(h_prev);
        assert!(
            fs.same_spatial(&hs) && g.shape(c_prev) == hs && hs.c == self.hidden,
            "convlstm_step: shape mismatch F={fs} H={hs} C={} hidden={}",
            g.shape(c_prev),
            self.hidden
        );

        // the four gate kernels share their input, so they run as one
        // convolution stacked along the output-channel axis (i, f, c, o);
        // each output channel's arithmetic is unchanged
        let ch = self.hidden;
        let geom = self.w_fi.geom;
        let wf = g.concat_outer(&[
            self.w_fi.weight,
            self.w_ff.weight,
            self.w_fc.weight,
            self.w_fo.weight,
        ]);
        let wh = g.concat_outer(&[
            self.w_hi.weight,
            self.w_hf.weight,
            self.w_hc.weight,
            self.w_ho.weight,
        ]);
        let pre_f = g.conv2d(f_t, wf, None, geom);
        let pre_h = g.conv2d(h_prev, wh, None, geom);
        let pre = g.add(pre_f, pre_h);

        let gate = |g: &mut GradGraph<S>, idx: usize, peep: Option<(Var, Var)>, b: Var| {
            let mut p = g.slice_channels(pre, idx * ch, ch);
            if let Some((wc, c)) = peep {
                let pm = g.channel_mul(c, wc);
                p = g.add(p, pm);
            }
            g.channel_add(p, b)
        };

        let i_pre = gate(g, 0, Some((self.w_ci, c_prev)), self.b_i);
        let i_t = g.sigmoid(i_pre);
        let f_pre = gate(g, 1, Some((self.w_cf, c_prev)), self.b_f);
        let f_gate = g.sigmoid(f_pre);
        let c_pre = gate(g, 2, None, self.b_c);
        let c_cand = g.tanh(c_pre);

        let keep = g.hadamard(f_gate, c_prev);
        let write = g.hadamard(i_t, c_cand);
        let c_t = g.add(keep, write);

        let o_pre = gate(g, 3, Some((self.w_co, c_t)), self.b_o);
        let o_t = g.sigmoid(o_pre);
        let c_act = g.tanh(c_t);
        let h_t = g.hadamard(o_t, c_act);
        (h_t, c_t)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.w_fi.collect(&format!("{prefix}.w_fi"), out);
        self.w_hi.collect(&format!("{prefix}.w_hi"), out);
        self.w_ff.collect(&format!("{prefix}.w_ff"), out);
        self.w_hf.collect(&format!("{prefix}.w_hf"), out);
        self.w_fc.collect(&format!("{prefix}.w_fc"), out);
        self.w_hc.collect(&format!("{prefix}.w_hc"), out);
        self.w_fo.collect(&format!("{prefix}.w_fo"), out);
        self.w_ho.collect(&format!("{prefix}.w_ho"), out);
        for (name, v) in [
            ("w_ci", self.w_ci),
            ("w_cf", self.w_cf),
            ("w_co", self.w_co),
            ("b_i", self.b_i),
            ("b_f", self.b_f),
            ("b_c", self.b_c),
            ("b_o", self.b_o),
        ] {
            out.push((format!("{prefix}.{name}"), v));
        }
    }

    /// All parameter vars (test helper for zeroing / inspection).
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect("cell", &mut out);
        out.into_iter().map(|(_, v)| v).collect()
    }
}

/// Additive attention gate. The skip feature H is modulated per pixel by
/// coefficients in (0,1) computed from the gating feature R:
/// alpha = sig(psi(relu(Wq*R + Wk*H))), A = alpha o H.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub psi: Conv2d,
    pub inter: usize,
}

impl AttentionGate {
    pub fn new<S: Scalar>(
        g: &mut GradGraph<S>,
        rng: &mut Rng,
        skip_ch: usize,
        gate_ch: usize,
    ) -> Self {
        let inter = (skip_ch / 2).max(1);
        let wq = Conv2d::new(g, rng, gate_ch, inter, 1, ConvGeom::unit(), true);
        let wk = Conv2d::new(g, rng, skip_ch, inter, 1, ConvGeom::unit(), true);
        let psi = Conv2d::new(g, rng, inter, 1, 1, ConvGeom::unit(), true);
        AttentionGate { wq, wk, psi, inter }
    }

    pub fn forward<S: Scalar>(&self, g: &mut GradGraph<S>, h_skip: Var, r_gate: Var) -> Var {
        let hs = g.shape(h_skip);
        let rs = g.shape(r_gate);
        assert!(
            hs.same_spatial(&rs),
            "attention_gate: skip {hs} and gate {rs} are not spatially congruent"
        );
        let q = self.wq.forward(g, r_gate);
        let k = self.wk.forward(g, h_skip);
        let s = g.add(q, k);
        let s = g.relu(s);
        let a = self.psi.forward(g, s);
        let alpha = g.sigmoid(a);
        g.spatial_mul(h_skip, alpha)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.psi.collect(&format!("{prefix}.psi"), out);
    }
}
