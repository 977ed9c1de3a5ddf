//! Central finite-difference gradient checking, always in f64.
//!
//! For a scalar-valued build function the checker compares the analytic
//! gradient from one backward pass against central differences
//! (f(x+h) - f(x-h)) / 2h per coordinate, with relative error
//! |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
//!
//! Coordinates sitting on a kink (relu at 0, a max-pool tie) make central
//! differences meaningless; they are detected by comparing the two
//! one-sided difference quotients and reported as excluded rather than
//! failed.

use crate::graph::{GradGraph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;

/// Relative disagreement between one-sided slopes above which a coordinate
/// is treated as non-differentiable and excluded.
const KINK_TOL: f64 = 0.1;

const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct CoordReport {
    /// Which input tensor the coordinate belongs to.
    pub input: usize,
    /// Flat coordinate within that input.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub non_finite: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates whose analytic/numeric disagreement sat below the
    /// finite-difference noise floor: counted as agreeing, since central
    /// differences carry no information at that scale.
    pub sub_noise: usize,
    /// Coordinates excluded as kinks: (input, coord).
    pub kinks: Vec<(usize, usize)>,
    /// Tolerance violations and non-finite evaluations, worst first.
    pub failures: Vec<CoordReport>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Check analytic gradients of `build` w.r.t. every coordinate of every
/// input. `build` must be deterministic; it receives one graph var per
/// input (registered as parameters) and returns the scalar output var.
pub fn check_gradients<F>(build: &F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut GradGraph<f64>, &[Var]) -> Var,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_coords(build, inputs, &coords, h, tol)
}

/// Like [`check_gradients`] but only over a random subsample of
/// coordinates, for large composites.
pub fn check_gradients_sampled<F>(
    build: &F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut GradGraph<f64>, &[Var]) -> Var,
{
    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let mut rng = Rng::derive(seed, &[0x5a4d]);
    let mut coords = Vec::with_capacity(samples.min(total));
    if samples >= total {
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                coords.push((i, j));
            }
        }
    } else {
        for _ in 0..samples {
            let mut k = rng.below(total);
            let mut i = 0;
            while k >= inputs[i].len() {
                k -= inputs[i].len();
                i += 1;
            }
            coords.push((i, k));
        }
    }
    check_coords(build, inputs, &coords, h, tol)
}

fn eval<F>(build: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut GradGraph<f64>, &[Var]) -> Var,
{
    let mut g = GradGraph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.scalar_value(out)
}

fn check_coords<F>(
    build: &F,
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn(&mut GradGraph<f64>, &[Var]) -> Var,
{
    check_coords_scaled(build, inputs, coords, h, tol, 1.0)
}

fn check_coords_scaled<F>(
    build: &F,
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
    analytic_scale: f64,
) -> GradCheckReport
where
    F: Fn(&mut GradGraph<f64>, &[Var]) -> Var,
{
    assert!(h > 0.0, "grad check step must be positive");
    // analytic pass
    let mut g = GradGraph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out);
    let f0 = g.scalar_value(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|s| s.iter().map(|&x| x * analytic_scale).collect())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut report = GradCheckReport { pass: true, ..Default::default() };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let fp = eval(build, &work);
        work[i].data_mut()[j] = orig - h;
        let fm = eval(build, &work);
        work[i].data_mut()[j] = orig;

        if !fp.is_finite() || !fm.is_finite() {
            report.pass = false;
            report.failures.push(CoordReport {
                input: i,
                coord: j,
                analytic: analytic[i][j],
                numeric: f64::NAN,
                rel_err: f64::INFINITY,
                non_finite: true,
            });
            continue;
        }

        let d_plus = (fp - f0) / h;
        let d_minus = (f0 - fm) / h;
        if (d_plus - d_minus).abs() / d_plus.abs().max(d_minus.abs()).max(1.0) > KINK_TOL {
            report.kinks.push((i, j));
            continue;
        }

        let numeric = (fp - fm) / (2.0 * h);
        report.checked += 1;
        // Central differences cannot resolve gradients below the
        // cancellation noise of the function evaluations themselves
        // (~eps * |f| / 2h). A disagreement inside that envelope says
        // nothing about the analytic rule, so it neither fails nor
        // contributes to the reported maximum. Genuine rule bugs scale
        // with the gradient magnitude and stay far above the envelope.
        let fscale = f0.abs().max(fp.abs()).max(fm.abs()).max(1.0);
        let noise = 8.0 * f64::EPSILON * fscale / (2.0 * h);
        if (analytic[i][j] - numeric).abs() <= noise {
            report.sub_noise += 1;
            continue;
        }
        let e = rel_err(analytic[i][j], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
        }
        if e > tol {
            report.pass = false;
            report.failures.push(CoordReport {
                input: i,
                coord: j,
                analytic: analytic[i][j],
                numeric,
                rel_err: e,
                non_finite: false,
            });
        }
    }
    report.failures.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    report
}

// ---- randomized per-layer suite -------------------------------------------

use crate::kernels::ConvGeom;
use crate::layers::{AttentionGate, BatchNorm2d, Conv2d, ConvLstmCell, Mode, TConv2d};
use crate::losses::{dice_loss, focal_tversky_loss, LossParams};
use crate::shape::Shape;

/// One suite item's aggregate over its randomized cases.
#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub item: String,
    pub cases: usize,
    pub checked: usize,
    pub kinks: usize,
    pub sub_noise: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    pub detail: String,
}

impl SuiteOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<16} cases={:<4} coords={:<6} kinks={:<4} sub_noise={:<6} max_rel_err={:.3e}{}",
            if self.pass { "PASS" } else { "FAIL" },
            self.item,
            self.cases,
            self.checked,
            self.kinks,
            self.sub_noise,
            self.max_rel_err,
            if self.detail.is_empty() { String::new() } else { format!("  ({})", self.detail) },
        )
    }
}

fn randn(shape: Shape, rng: &mut Rng, std: f64) -> Tensor<f64> {
    Tensor::normal_from(shape, rng, 0.0, std)
}

fn merge(outcome: &mut SuiteOutcome, r: &GradCheckReport) {
    outcome.checked += r.checked;
    outcome.kinks += r.kinks.len();
    outcome.sub_noise += r.sub_noise;
    if r.max_rel_err > outcome.max_rel_err {
        outcome.max_rel_err = r.max_rel_err;
    }
    if !r.pass {
        outcome.pass = false;
        if outcome.detail.is_empty() {
            if let Some(f) = r.failures.first() {
                outcome.detail = format!(
                    "input {} coord {}: analytic {:.6e} vs numeric {:.6e}",
                    f.input, f.coord, f.analytic, f.numeric
                );
            }
        }
    }
}

/// Names accepted by [`run_unit_suite`].
pub const UNIT_SUITE_ITEMS: &[&str] = &[
    "elementwise",
    "conv2d_dil1",
    "conv2d_dil2",
    "conv2d_dil4",
    "conv2d_dil8",
    "conv2d_stride2",
    "tconv2d",
    "maxpool2x2",
    "batchnorm",
    "convlstm",
    "attention_gate",
    "dice_loss",
    "focal_tversky_loss",
];

/// Run `cases` randomized finite-difference checks for every layer and both
/// training losses, in f64. `fault`, when set to an item name, scales that
/// item's analytic gradients by 1.01 before comparison so the reporting
/// path can be exercised deliberately.
pub fn run_unit_suite(cases: usize, seed: u64, tol: f64, fault: Option<&str>) -> Vec<SuiteOutcome> {
    UNIT_SUITE_ITEMS
        .iter()
        .enumerate()
        .map(|(idx, &item)| {
            let scale = if fault == Some(item) { 1.01 } else { 1.0 };
            let mut outcome = SuiteOutcome {
                item: item.to_string(),
                cases,
                checked: 0,
                kinks: 0,
                sub_noise: 0,
                max_rel_err: 0.0,
                pass: true,
                detail: String::new(),
            };
            for case in 0..cases {
                let mut rng = Rng::derive(seed, &[idx as u64, case as u64]);
                let r = run_case(item, &mut rng, tol, scale);
                merge(&mut outcome, &r);
            }
            outcome
        })
        .collect()
}

const SUITE_H: f64 = DEFAULT_H;

fn check_all(
    build: &dyn Fn(&mut GradGraph<f64>, &[Var]) -> Var,
    inputs: &[Tensor<f64>],
    tol: f64,
    scale: f64,
) -> GradCheckReport {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_coords_scaled(&build, inputs, &coords, SUITE_H, tol, scale)
}

fn conv_case(rng: &mut Rng, tol: f64, scale: f64, geom: ConvGeom, k: usize) -> GradCheckReport {
    let ic = 1 + rng.below(2);
    let oc = 1 + rng.below(2);
    let side = 2 * geom.dil + k + 2 + rng.below(2);
    let x = randn(Shape::new(1, ic, side, side), rng, 1.0);
    let w = randn(Shape::new(oc, ic, k, k), rng, 0.5);
    let b = randn(Shape::new(1, oc, 1, 1), rng, 0.2);
    let build = move |g: &mut GradGraph<f64>, vs: &[Var]| {
        let conv = Conv2d { weight: vs[1], bias: Some(vs[2]), geom, in_ch: ic, out_ch: oc, k };
        let y = conv.forward(g, vs[0]);
        let s = g.sigmoid(y);
        g.sum_all(s)
    };
    check_all(&build, &[x, w, b], tol, scale)
}

fn run_case(item: &str, rng: &mut Rng, tol: f64, scale: f64) -> GradCheckReport {
    match item {
        "elementwise" => {
            let s = Shape::new(1, 2, 3, 3);
            let a = randn(s, rng, 1.0);
            let b = randn(s, rng, 1.0);
            let c = randn(s, rng, 1.0);
            let build = |g: &mut GradGraph<f64>, vs: &[Var]| {
                let p = g.hadamard(vs[0], vs[1]);
                let sg = g.sigmoid(p);
                let r = g.relu(vs[2]);
                let t = g.tanh(r);
                let u = g.add(sg, t);
                g.sum_all(u)
            };
            check_all(&build, &[a, b, c], tol, scale)
        }
        "conv2d_dil1" => conv_case(rng, tol, scale, ConvGeom::same(3, 1), 3),
        "conv2d_dil2" => conv_case(rng, tol, scale, ConvGeom::same(3, 2), 3),
        "conv2d_dil4" => conv_case(rng, tol, scale, ConvGeom::same(3, 4), 3),
        "conv2d_dil8" => conv_case(rng, tol, scale, ConvGeom::same(3, 8), 3),
        "conv2d_stride2" => conv_case(rng, tol, scale, ConvGeom { stride: 2, pad: 1, dil: 1 }, 3),
        "tconv2d" => {
            let ic = 1 + rng.below(2);
            let oc = 1 + rng.below(2);
            let x = randn(Shape::new(1, ic, 4, 4), rng, 1.0);
            let w = randn(Shape::new(ic, oc, 2, 2), rng, 0.5);
            let b = randn(Shape::new(1, oc, 1, 1), rng, 0.2);
            let build = move |g: &mut GradGraph<f64>, vs: &[Var]| {
                let up = TConv2d {
                    weight: vs[1],
                    bias: Some(vs[2]),
                    stride: 2,
                    pad: 0,
                    in_ch: ic,
                    out_ch: oc,
                    k: 2,
                };
                let y = up.forward(g, vs[0]);
                let s = g.sigmoid(y);
                g.sum_all(s)
            };
            check_all(&build, &[x, w, b], tol, scale)
        }
        "maxpool2x2" => {
            let c = 1 + rng.below(2);
            let x = randn(Shape::new(1, c, 6, 6), rng, 1.0);
            let build = |g: &mut GradGraph<f64>, vs: &[Var]| {
                let y = g.maxpool2x2(vs[0]);
                let s = g.sigmoid(y);
                g.sum_all(s)
            };
            check_all(&build, &[x], tol, scale)
        }
        "batchnorm" => {
            let c = 1 + rng.below(2);
            let x = randn(Shape::new(2, c, 4, 4), rng, 1.0);
            let sc = randn(Shape::new(1, c, 1, 1), rng, 0.3).map(|v| v + 1.0);
            let sh = randn(Shape::new(1, c, 1, 1), rng, 0.3);
            let build = move |g: &mut GradGraph<f64>, vs: &[Var]| {
                let mut bn = BatchNorm2d {
                    scale: vs[1],
                    shift: vs[2],
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                    momentum: 0.1,
                    eps: 1e-5,
                    ch: c,
                };
                let y = bn.forward(g, vs[0], Mode::Train);
                let s = g.sigmoid(y);
                g.sum_all(s)
            };
            check_all(&build, &[x, sc, sh], tol, scale)
        }
        "convlstm" => {
            let (ic, hidden, side, t_steps) = (2, 2, 4, 4);
            let geom = ConvGeom::same(3, 1);
            let kshape_f = Shape::new(hidden, ic, 3, 3);
            let kshape_h = Shape::new(hidden, hidden, 3, 3);
            let pshape = Shape::new(1, hidden, 1, 1);
            let mut inputs: Vec<Tensor<f64>> = Vec::new();
            for _ in 0..4 {
                inputs.push(randn(kshape_f, rng, 0.4));
                inputs.push(randn(kshape_h, rng, 0.4));
            }
            for _ in 0..3 {
                inputs.push(randn(pshape, rng, 0.3));
            }
            for _ in 0..4 {
                inputs.push(randn(pshape, rng, 0.3));
            }
            for _ in 0..t_steps {
                inputs.push(randn(Shape::new(1, ic, side, side), rng, 1.0));
            }
            let build = move |g: &mut GradGraph<f64>, vs: &[Var]| {
                let conv = |weight: Var, in_ch: usize| Conv2d {
                    weight,
                    bias: None,
                    geom,
                    in_ch,
                    out_ch: hidden,
                    k: 3,
                };
                let cell = ConvLstmCell {
                    w_fi: conv(vs[0], ic),
                    w_hi: conv(vs[1], hidden),
                    w_ff: conv(vs[2], ic),
                    w_hf: conv(vs[3], hidden),
                    w_fc: conv(vs[4], ic),
                    w_hc: conv(vs[5], hidden),
                    w_fo: conv(vs[6], ic),
                    w_ho: conv(vs[7], hidden),
                    w_ci: vs[8],
                    w_cf: vs[9],
                    w_co: vs[10],
                    b_i: vs[11],
                    b_f: vs[12],
                    b_c: vs[13],
                    b_o: vs[14],
                    in_ch: ic,
                    hidden,
                };
                let (mut h, mut c) = cell.zero_state(g, 1, side, side);
                for t in 0..t_steps {
                    let (h2, c2) = cell.step(g, vs[15 + t], h, c);
                    h = h2;
                    c = c2;
                }
                g.sum_all(h)
            };
            check_all(&build, &inputs, tol, scale)
        }
        "attention_gate" => {
            let c = 2;
            let inter = 1;
            let side = 4;
            let h = randn(Shape::new(1, c, side, side), rng, 1.0);
            let r = randn(Shape::new(1, c, side, side), rng, 1.0);
            let wq = randn(Shape::new(inter, c, 1, 1), rng, 0.5);
            let bq = randn(Shape::new(1, inter, 1, 1), rng, 0.2);
            let wk = randn(Shape::new(inter, c, 1, 1), rng, 0.5);
            let bk = randn(Shape::new(1, inter, 1, 1), rng, 0.2);
            let wp = randn(Shape::new(1, inter, 1, 1), rng, 0.5);
            let bp = randn(Shape::new(1, 1, 1, 1), rng, 0.2);
            let build = move |g: &mut GradGraph<f64>, vs: &[Var]| {
                let mk = |weight: Var, bias: Var, in_ch: usize, out_ch: usize| Conv2d {
                    weight,
                    bias: Some(bias),
                    geom: ConvGeom::unit(),
                    in_ch,
                    out_ch,
                    k: 1,
                };
                let gate = AttentionGate {
                    wq: mk(vs[2], vs[3], c, inter),
                    wk: mk(vs[4], vs[5], c, inter),
                    psi: mk(vs[6], vs[7], inter, 1),
                    inter,
                };
                let a = gate.forward(g, vs[0], vs[1]);
                let s = g.sigmoid(a);
                g.sum_all(s)
            };
            check_all(&build, &[h, r, wq, bq, wk, bk, wp, bp], tol, scale)
        }
        "dice_loss" => {
            let n = 10;
            let yhat = Tensor::from_vec(
                Shape::new(1, 1, 1, n),
                (0..n).map(|_| rng.range(0.05, 0.95)).collect(),
            );
            let y: Vec<f64> = (0..n).map(|_| if rng.coin(0.5) { 1.0 } else { 0.0 }).collect();
            let build = move |g: &mut GradGraph<f64>, vs: &[Var]| {
                let t = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, n), y.clone()));
                dice_loss(g, vs[0], t, 1e-6)
            };
            check_all(&build, &[yhat], tol, scale)
        }
        "focal_tversky_loss" => {
            let n = 10;
            let p = LossParams::default();
            let yhat = Tensor::from_vec(
                Shape::new(1, 1, 1, n),
                (0..n).map(|_| rng.range(0.05, 0.95)).collect(),
            );
            let y: Vec<f64> = (0..n).map(|_| if rng.coin(0.5) { 1.0 } else { 0.0 }).collect();
            let build = move |g: &mut GradGraph<f64>, vs: &[Var]| {
                let t = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, n), y.clone()));
                focal_tversky_loss(g, vs[0], t, &p)
            };
            check_all(&build, &[yhat], tol, scale)
        }
        other => panic!("unknown suite item {other}"),
    }
}


#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn quick_suite_passes_at_1e4() {
        let outcomes = run_unit_suite(3, 42, 1e-4, None);
        for o in &outcomes {
            assert!(o.pass, "{}", o.line());
            assert!(o.checked > 0, "{} checked nothing", o.item);
        }
    }

    #[test]
    fn injected_fault_is_reported_with_item_name() {
        let outcomes = run_unit_suite(2, 42, 1e-4, Some("conv2d_dil2"));
        let bad: Vec<_> = outcomes.iter().filter(|o| !o.pass).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].item, "conv2d_dil2");
        assert!(!bad[0].detail.is_empty());
    }
}
