//! Recurrent context encoding: a bank of dilated convolutions with
//! ascending rates whose outputs are folded into one representation by a
//! ConvLSTM (a "zoom-in" over growing receptive fields), plus the
//! attention-gated multi-scale skip that carries every intermediate hidden
//! state to the decoders.

use crate::graph::{GradGraph, Var};
use crate::layers::{AttentionGate, Conv2d, ConvLstmCell, ParamList, TConv2d};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Context states {H_t} captured at one encoder stage, kept for decoding.
#[derive(Clone, Debug)]
pub struct SkipBundle {
    pub states: Vec<Var>,
}

/// Dilated conv bank plus ConvLSTM accumulator. The hidden width equals
/// the feature width so H_T can feed the next encoder layer directly.
#[derive(Clone, Debug)]
pub struct RcemBlock {
    pub rates: Vec<usize>,
    pub bank: Vec<Conv2d>,
    pub cell: ConvLstmCell,
    pub ch: usize,
}

impl RcemBlock {
    pub fn new<S: Scalar>(g: &mut GradGraph<S>, rng: &mut Rng, ch: usize, rates: &[usize]) -> Self {
        assert!(!rates.is_empty(), "rcem needs at least one dilation rate");
        assert!(
            rates.windows(2).all(|w| w[0] < w[1]),
            "dilation rates must be strictly ascending, got {rates:?}"
        );
        let bank = rates.iter().map(|&r| Conv2d::same3x3(g, rng, ch, ch, r)).collect();
        let cell = ConvLstmCell::new(g, rng, ch, ch);
        RcemBlock { rates: rates.to_vec(), bank, cell, ch }
    }

    pub fn t_steps(&self) -> usize {
        self.rates.len()
    }

    /// F_t = Conv(F, r_t), (H_t, C_t) = step(F_t, H_{t-1}, C_{t-1}) from a
    /// zero initial state; returns H_T and all H_t.
    pub fn forward<S: Scalar>(&self, g: &mut GradGraph<S>, f: Var) -> (Var, SkipBundle) {
        let fs = g.shape(f);
        assert_eq!(fs.c, self.ch, "rcem_forward: feature channels {} != bank channels {}", fs.c, self.ch);
        let mut states = Vec::with_capacity(self.bank.len());
        let (mut h, mut c) = {
            let f_1 = self.bank[0].forward(g, f);
            self.cell.step_from_zero(g, f_1)
        };
        states.push(h);
        for conv in &self.bank[1..] {
            let f_t = conv.forward(g, f);
            let (h2, c2) = self.cell.step(g, f_t, h, c);
            h = h2;
            c = c2;
            states.push(h);
        }
        (h, SkipBundle { states })
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        for (i, conv) in self.bank.iter().enumerate() {
            conv.collect(&format!("{prefix}.bank{i}"), out);
        }
        self.cell.collect(&format!("{prefix}.cell"), out);
    }
}

/// Decoder-side consumer of a [`SkipBundle`]: the half-resolution decoder
/// feature R is upsampled once by a shared stride-2 transposed conv (this
/// is Z), re-contextualized by dilated convs with the encoder's rates, and
/// each R_t gates its H_t; the gated maps and Z concatenate into the next
/// decoding layer's input.
#[derive(Clone, Debug)]
pub struct MultiScaleSkip {
    pub upproj: TConv2d,
    pub rbank: Vec<Conv2d>,
    pub gates: Vec<AttentionGate>,
    pub ch: usize,
}

impl MultiScaleSkip {
    /// `ch` is the skip (encoder-side) channel width; R carries `2*ch`.
    pub fn new<S: Scalar>(g: &mut GradGraph<S>, rng: &mut Rng, ch: usize, rates: &[usize]) -> Self {
        let upproj = TConv2d::new(g, rng, 2 * ch, ch, 2, 2, 0, true);
        let rbank = rates.iter().map(|&r| Conv2d::same3x3(g, rng, ch, ch, r)).collect();
        let gates = rates.iter().map(|_| AttentionGate::new(g, rng, ch, ch)).collect();
        MultiScaleSkip { upproj, rbank, gates, ch }
    }

    pub fn forward<S: Scalar>(&self, g: &mut GradGraph<S>, bundle: &SkipBundle, r: Var) -> Var {
        multi_scale_skip(g, bundle, r, &self.gates, &self.rbank, &self.upproj)
    }

    /// Channels of the concatenated output: T*ch + ch.
    pub fn out_channels(&self) -> usize {
        (self.rbank.len() + 1) * self.ch
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.upproj.collect(&format!("{prefix}.upproj"), out);
        for (i, conv) in self.rbank.iter().enumerate() {
            conv.collect(&format!("{prefix}.rbank{i}"), out);
        }
        for (i, gate) in self.gates.iter().enumerate() {
            gate.collect(&format!("{prefix}.gate{i}"), out);
        }
    }
}

/// Z = upproj(R); R_t = rbank_t(Z); A_t = gate_t(H_t, R_t);
/// returns concat([A_1 .. A_T, Z]).
pub fn multi_scale_skip<S: Scalar>(
    g: &mut GradGraph<S>,
    bundle: &SkipBundle,
    r: Var,
    gates: &[AttentionGate],
    rbank: &[Conv2d],
    upproj: &TConv2d,
) -> Var {
    assert!(!bundle.states.is_empty(), "multi_scale_skip: empty bundle");
    assert_eq!(bundle.states.len(), gates.len(), "multi_scale_skip: one gate per state");
    assert_eq!(bundle.states.len(), rbank.len(), "multi_scale_skip: one dilated conv per state");
    let hs = g.shape(bundle.states[0]);
    let rs = g.shape(r);
    assert!(
        rs.h * 2 == hs.h && rs.w * 2 == hs.w && rs.n == hs.n,
        "multi_scale_skip: decoder feature {rs} must be half the skip resolution {hs}"
    );
    let z = upproj.forward(g, r);
    let zs = g.shape(z);
    assert!(
        zs.same_spatial(&hs) && zs.c == hs.c,
        "multi_scale_skip: upsampled feature {zs} does not match skip states {hs}"
    );
    let mut parts = Vec::with_capacity(bundle.states.len() + 1);
    for ((&h_t, conv), gate) in bundle.states.iter().zip(rbank).zip(gates) {
        let r_t = conv.forward(g, z);
        parts.push(gate.forward(g, h_t, r_t));
    }
    parts.push(z);
    g.concat_channels(&parts)
}
