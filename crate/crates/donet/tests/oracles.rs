//! Independent naive-loop oracles for the spatial kernels: a direct
//! seven-loop convolution, a four-way max pool, and a pixel-counting
//! metrics pass. The fast paths must reproduce them exactly at the same
//! precision; both sides accumulate taps in (ic, kh, kw) order with fused
//! multiply-adds, so equality is bitwise, not approximate.

use donet::graph::GradGraph;
use donet::kernels::{self, ConvGeom};
use donet::metrics::{compute_metrics, ConfusionCounts, SegmentationMetrics};
use donet::rng::Rng;
use donet::shape::Shape;
use donet::tensor::Tensor;

fn randn(shape: Shape, rng: &mut Rng, std: f64) -> Tensor<f32> {
    Tensor::normal_from(shape, rng, 0.0, std)
}

/// Direct definition: out[n][oc][oh][ow] = b[oc] + sum over (ic, kh, kw)
/// of w * x, skipping taps that fall outside the padded input.
fn naive_conv2d(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    bias: Option<&[f32]>,
    g: ConvGeom,
) -> Tensor<f32> {
    let xs = x.shape();
    let ws = w.shape();
    let os = kernels::conv2d_out_shape(xs, ws, g);
    let mut out = Tensor::zeros(os);
    for n in 0..os.n {
        for oc in 0..os.c {
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut acc = bias.map(|b| b[oc]).unwrap_or(0.0);
                    for ic in 0..xs.c {
                        for kh in 0..ws.h {
                            for kw in 0..ws.w {
                                let ih = (oh * g.stride + kh * g.dil) as isize - g.pad as isize;
                                let iw = (ow * g.stride + kw * g.dil) as isize - g.pad as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih >= xs.h as isize
                                    || iw >= xs.w as isize
                                {
                                    continue;
                                }
                                let xv = x.at(n, ic, ih as usize, iw as usize);
                                let wv = w.at(oc, ic, kh, kw);
                                acc = wv.mul_add(xv, acc);
                            }
                        }
                    }
                    out.set(n, oc, oh, ow, acc);
                }
            }
        }
    }
    out
}

fn naive_maxpool(x: &Tensor<f32>) -> Tensor<f32> {
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
    let mut out = Tensor::zeros(os);
    for n in 0..os.n {
        for c in 0..os.c {
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut best = f32::NEG_INFINITY;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let v = x.at(n, c, 2 * oh + dh, 2 * ow + dw);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.set(n, c, oh, ow, best);
                }
            }
        }
    }
    out
}

fn run_conv_case(rng: &mut Rng, geom: ConvGeom, k: usize) {
    let ic = 1 + rng.below(4);
    let oc = 1 + rng.below(4);
    let n = 1 + rng.below(2);
    let side = (geom.dil * (k - 1) + 1).max(4) + rng.below(5);
    let x = randn(Shape::new(n, ic, side, side), rng, 1.0);
    let w = randn(Shape::new(oc, ic, k, k), rng, 0.5);
    let b: Vec<f32> = (0..oc).map(|_| rng.normal(0.0, 0.2) as f32).collect();

    let expected = naive_conv2d(&x, &w, Some(&b), geom);
    let mut g: GradGraph<f32> = GradGraph::new();
    let xv = g.leaf(x);
    let wv = g.leaf(w);
    let bv = g.leaf(Tensor::from_vec(Shape::new(1, oc, 1, 1), b));
    let y = g.conv2d(xv, wv, Some(bv), geom);
    assert_eq!(
        g.data(y),
        expected.data(),
        "conv mismatch for geom {geom:?}, k {k}, shapes {} {}",
        g.shape(xv),
        g.shape(wv),
    );
}

#[test]
fn conv_matches_naive_loops_exactly() {
    let mut rng = Rng::new(2024);
    for case in 0..60 {
        let geom = match case % 6 {
            0 => ConvGeom::same(3, 1),
            1 => ConvGeom::same(3, 2),
            2 => ConvGeom::same(3, 4),
            3 => ConvGeom::same(3, 8),
            4 => ConvGeom { stride: 2, pad: 1, dil: 1 },
            _ => ConvGeom::unit(),
        };
        let k = if case % 6 == 5 { 1 } else { 3 };
        run_conv_case(&mut rng, geom, k);
    }
}

#[test]
fn conv_small_plane_path_matches_naive_loops_exactly() {
    // 8x8 and 16x16 outputs route through the reshaped fast path
    let mut rng = Rng::new(77);
    for _ in 0..30 {
        let side = [8, 16][rng.below(2)];
        let ic = 1 + rng.below(6);
        let oc = 1 + rng.below(6);
        let x = randn(Shape::new(2, ic, side, side), &mut rng, 1.0);
        let w = randn(Shape::new(oc, ic, 3, 3), &mut rng, 0.5);
        let geom = ConvGeom::same(3, 1);
        let expected = naive_conv2d(&x, &w, None, geom);
        let mut g: GradGraph<f32> = GradGraph::new();
        let xv = g.leaf(x);
        let wv = g.leaf(w);
        let y = g.conv2d(xv, wv, None, geom);
        assert_eq!(g.data(y), expected.data());
    }
}

#[test]
fn maxpool_matches_naive_loops_exactly() {
    let mut rng = Rng::new(4096);
    for _ in 0..50 {
        let x = randn(Shape::new(1 + rng.below(2), 1 + rng.below(3), 8, 8), &mut rng, 1.0);
        let expected = naive_maxpool(&x);
        let mut g: GradGraph<f32> = GradGraph::new();
        let xv = g.leaf(x);
        let y = g.maxpool2x2(xv);
        assert_eq!(g.data(y), expected.data());
    }
}

/// Counting oracle: classify every pixel with explicit branches and
/// rational arithmetic on the counts.
fn naive_metrics(sr: &[f32], gt: &[f32]) -> (ConfusionCounts, SegmentationMetrics) {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in sr.iter().zip(gt) {
        if p == 1.0 && g == 1.0 {
            c.tp += 1;
        } else if p == 1.0 {
            c.fp += 1;
        } else if g == 1.0 {
            c.fn_ += 1;
        } else {
            c.tn += 1;
        }
    }
    let gt_n = c.tp + c.fn_;
    let sr_n = c.tp + c.fp;
    let inter = c.tp;
    let union = c.tp + c.fp + c.fn_;
    let m = SegmentationMetrics {
        dsc: if gt_n + sr_n == 0 { 1.0 } else { 2.0 * inter as f64 / (gt_n + sr_n) as f64 },
        ji: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        recall: if gt_n == 0 {
            if sr_n == 0 { 1.0 } else { 0.0 }
        } else {
            c.tp as f64 / gt_n as f64
        },
        precision: if sr_n == 0 {
            if gt_n == 0 { 1.0 } else { 0.0 }
        } else {
            c.tp as f64 / sr_n as f64
        },
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
    };
    (c, m)
}

#[test]
fn metrics_match_counting_oracle_on_1000_pairs() {
    let mut rng = Rng::new(31337);
    for i in 0..1000 {
        let n = 8 + rng.below(56);
        let density = rng.uniform();
        let sr: Vec<f32> = (0..n).map(|_| if rng.coin(density) { 1.0 } else { 0.0 }).collect();
        let gt: Vec<f32> = (0..n).map(|_| if rng.coin(0.5) { 1.0 } else { 0.0 }).collect();
        let shape = Shape::new(1, 1, 1, n);
        let (c_fast, m_fast) = compute_metrics(
            &Tensor::from_vec(shape, sr.clone()),
            &Tensor::from_vec(shape, gt.clone()),
        )
        .unwrap();
        let (c_naive, m_naive) = naive_metrics(&sr, &gt);
        assert_eq!(c_fast, c_naive, "counts differ on pair {i}");
        assert_eq!(m_fast, m_naive, "metrics differ on pair {i}");
    }
}
