//! Segmentation losses over probability maps: dice, tversky, focal and
//! focal tversky, plus the three-headed objective that supervises the two
//! decoder maps and the joint prediction.
//!
//! All losses are built from graph primitives, so one backward pass on the
//! combined objective reaches the whole network. Targets must be strictly
//! binary; predictions are probabilities in [0,1].

use crate::error::{Error, Result};
use crate::graph::{GradGraph, Var};
use crate::scalar::Scalar;

/// Hyperparameters shared by the loss family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            epsilon: 1e-6,
            alpha: 0.7,
            beta: 0.3,
            gamma: 0.75,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    Tversky,
    Focal,
    FocalTversky,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dl" => Ok(LossKind::Dice),
            "tl" => Ok(LossKind::Tversky),
            "fl" => Ok(LossKind::Focal),
            "ftl" => Ok(LossKind::FocalTversky),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected dl, tl, fl or ftl)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Dice => "dl",
            LossKind::Tversky => "tl",
            LossKind::Focal => "fl",
            LossKind::FocalTversky => "ftl",
        }
    }
}

/// Loss assignment for the dual objective: L1 drives decoder one, L2
/// decoder two, and the joint map is optimized by L_f = L1 + L2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub l1_kind: LossKind,
    pub l2_kind: LossKind,
    pub params: LossParams,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            l1_kind: LossKind::Dice,
            l2_kind: LossKind::FocalTversky,
            params: LossParams::default(),
        }
    }
}

fn check_pair<S: Scalar>(g: &GradGraph<S>, yhat: Var, y: Var, name: &str) {
    let (ps, ts) = (g.shape(yhat), g.shape(y));
    assert_eq!(ps, ts, "{name}: shape mismatch {ps} vs {ts}");
    for &v in g.data(y) {
        assert!(
            v == S::ZERO || v == S::ONE,
            "{name}: target must be binary, found {v}"
        );
    }
    for &v in g.data(yhat) {
        assert!(
            v >= S::ZERO && v <= S::ONE,
            "{name}: prediction must lie in [0,1], found {v}"
        );
    }
}

/// DL = 1 - 2 (sum(yhat*y) + eps) / (sum(yhat + y) + eps), summed over all
/// batch pixels.
pub fn dice_loss<S: Scalar>(g: &mut GradGraph<S>, yhat: Var, y: Var, eps: f64) -> Var {
    check_pair(g, yhat, y, "dice_loss");
    let inter = g.hadamard(yhat, y);
    let inter = g.sum_all(inter);
    let num = g.affine(inter, 2.0, 2.0 * eps);
    let both = g.add(yhat, y);
    let den = g.sum_all(both);
    let den = g.affine(den, 1.0, eps);
    let ratio = g.div(num, den);
    g.affine(ratio, -1.0, 1.0)
}

/// TI = (sum(yhat*y) + eps)
///    / (sum(yhat*y) + alpha*sum((1-yhat)*y) + beta*sum(yhat*(1-y)) + eps)
pub fn tversky_index<S: Scalar>(
    g: &mut GradGraph<S>,
    yhat: Var,
    y: Var,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Var {
    check_pair(g, yhat, y, "tversky_index");
    let tp = g.hadamard(yhat, y);
    let tp = g.sum_all(tp);
    let miss = g.affine(yhat, -1.0, 1.0);
    let fn_ = g.hadamard(miss, y);
    let fn_ = g.sum_all(fn_);
    let bg = g.affine(y, -1.0, 1.0);
    let fp = g.hadamard(yhat, bg);
    let fp = g.sum_all(fp);

    let num = g.affine(tp, 1.0, eps);
    let a_fn = g.affine(fn_, alpha, 0.0);
    let b_fp = g.affine(fp, beta, 0.0);
    let den = g.add(tp, a_fn);
    let den = g.add(den, b_fp);
    let den = g.affine(den, 1.0, eps);
    g.div(num, den)
}

/// TL = 1 - TI (the gamma = 1 specialization of the focal tversky loss).
pub fn tversky_loss<S: Scalar>(g: &mut GradGraph<S>, yhat: Var, y: Var, p: &LossParams) -> Var {
    let ti = tversky_index(g, yhat, y, p.alpha, p.beta, p.epsilon);
    g.affine(ti, -1.0, 1.0)
}

/// FTL = (1 - TI)^(1/gamma); the base is clamped below at 1e-8 so the
/// power's gradient stays finite as TI -> 1.
pub fn focal_tversky_loss<S: Scalar>(
    g: &mut GradGraph<S>,
    yhat: Var,
    y: Var,
    p: &LossParams,
) -> Var {
    assert!(p.gamma > 0.0, "focal tversky requires gamma > 0");
    let ti = tversky_index(g, yhat, y, p.alpha, p.beta, p.epsilon);
    let one_minus = g.affine(ti, -1.0, 1.0);
    let base = g.clamp(one_minus, 1e-8, f64::INFINITY);
    g.powf(base, 1.0 / p.gamma)
}

/// Standard binary focal cross-entropy, averaged over pixels. Predictions
/// are clamped to [1e-7, 1-1e-7] before the logs.
pub fn focal_loss<S: Scalar>(
    g: &mut GradGraph<S>,
    yhat: Var,
    y: Var,
    focal_gamma: f64,
    focal_alpha: f64,
) -> Var {
    check_pair(g, yhat, y, "focal_loss");
    let p = g.clamp(yhat, 1e-7, 1.0 - 1e-7);
    let q = g.affine(p, -1.0, 1.0); // 1 - p
    let logp = g.ln(p);
    let logq = g.ln(q);
    let qg = g.powf(q, focal_gamma);
    let pg = g.powf(p, focal_gamma);
    // alpha * (1-p)^g * y * log p
    let pos = g.hadamard(qg, y);
    let pos = g.hadamard(pos, logp);
    let pos = g.affine(pos, focal_alpha, 0.0);
    // (1-alpha) * p^g * (1-y) * log(1-p)
    let ybg = g.affine(y, -1.0, 1.0);
    let neg = g.hadamard(pg, ybg);
    let neg = g.hadamard(neg, logq);
    let neg = g.affine(neg, 1.0 - focal_alpha, 0.0);
    let term = g.add(pos, neg);
    let mean = g.mean_all(term);
    g.affine(mean, -1.0, 0.0)
}

pub fn apply_loss<S: Scalar>(
    g: &mut GradGraph<S>,
    kind: LossKind,
    yhat: Var,
    y: Var,
    p: &LossParams,
) -> Var {
    match kind {
        LossKind::Dice => dice_loss(g, yhat, y, p.epsilon),
        LossKind::Tversky => tversky_loss(g, yhat, y, p),
        LossKind::Focal => focal_loss(g, yhat, y, p.focal_gamma, p.focal_alpha),
        LossKind::FocalTversky => focal_tversky_loss(g, yhat, y, p),
    }
}

/// Scalar slots of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossValues {
    pub total: Var,
    pub l1: Var,
    /// Absent when the model runs a single decoder.
    pub l2: Option<Var>,
    pub lf: Var,
}

/// The three-headed objective: l1 on decoder one's map, l2 on decoder
/// two's, and lf = L1 + L2 applied to the joint map. With a single decoder
/// (`y2` = None, joint = y1) the l2 head is omitted and the total becomes
/// l1 + lf, i.e. the baseline protocol of summed losses on one map.
pub fn combined_objective<S: Scalar>(
    g: &mut GradGraph<S>,
    cfg: &ObjectiveConfig,
    y1: Var,
    y2: Option<Var>,
    y_joint: Var,
    target: Var,
) -> LossValues {
    let p = &cfg.params;
    let l1 = apply_loss(g, cfg.l1_kind, y1, target, p);
    let l2 = y2.map(|y2| apply_loss(g, cfg.l2_kind, y2, target, p));
    let lf_a = apply_loss(g, cfg.l1_kind, y_joint, target, p);
    let lf_b = apply_loss(g, cfg.l2_kind, y_joint, target, p);
    let lf = g.add(lf_a, lf_b);
    let total = match l2 {
        Some(l2) => {
            let t = g.add(l1, l2);
            g.add(t, lf)
        }
        None => g.add(l1, lf),
    };
    LossValues { total, l1, l2, lf }
}
