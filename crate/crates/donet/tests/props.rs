//! Property tests for the structural invariants: channel concat/split
//! round-trips, the joint-decision product bounds, binarization and the
//! dice/Jaccard identity.

use donet::graph::GradGraph;
use donet::metrics::{binarize, compute_metrics};
use donet::shape::Shape;
use donet::tensor::Tensor;
use proptest::prelude::*;

fn probs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_then_split_round_trips(
        c1 in 1usize..4,
        c2 in 1usize..4,
        c3 in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut rng = donet::rng::Rng::new(seed);
        let mk = |c: usize, rng: &mut donet::rng::Rng| {
            Tensor::<f64>::normal_from(Shape::new(2, c, 3, 5), rng, 0.0, 1.0)
        };
        let (a, b, c) = (mk(c1, &mut rng), mk(c2, &mut rng), mk(c3, &mut rng));
        let mut g: GradGraph<f64> = GradGraph::new();
        let (va, vb, vc) = (g.leaf(a.clone()), g.leaf(b.clone()), g.leaf(c.clone()));
        let cat = g.concat_channels(&[va, vb, vc]);
        let parts = g.value(cat).split_channels(&[c1, c2, c3]);
        prop_assert_eq!(&parts[0], &a);
        prop_assert_eq!(&parts[1], &b);
        prop_assert_eq!(&parts[2], &c);
    }

    #[test]
    fn joint_product_bounds_and_containment(
        y1 in probs(64),
        y2 in probs(64),
    ) {
        let shape = Shape::new(1, 1, 8, 8);
        let t1 = Tensor::from_vec(shape, y1.clone());
        let t2 = Tensor::from_vec(shape, y2.clone());
        let mut g: GradGraph<f64> = GradGraph::new();
        let (v1, v2) = (g.leaf(t1.clone()), g.leaf(t2.clone()));
        let joint = g.hadamard(v1, v2);
        let jd = g.value(joint).clone();
        for ((&j, &a), &b) in jd.data().iter().zip(&y1).zip(&y2) {
            prop_assert_eq!(j, a * b);
            prop_assert!(j <= a.min(b) + 1e-15);
        }
        // thresholded joint positives are contained in both maps' positives
        let bj = binarize(&jd, 0.5).unwrap();
        let b1 = binarize(&t1, 0.5).unwrap();
        let b2 = binarize(&t2, 0.5).unwrap();
        for ((&j, &a), &b) in bj.data().iter().zip(b1.data()).zip(b2.data()) {
            if j == 1.0 {
                prop_assert_eq!((a, b), (1.0, 1.0));
            }
        }
    }

    #[test]
    fn binarize_idempotent_and_binary(x in probs(32), thr in 0.0f64..1.0) {
        let t = Tensor::from_vec(Shape::new(1, 1, 4, 8), x);
        let once = binarize(&t, thr).unwrap();
        prop_assert!(once.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let twice = binarize(&once, thr).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn dice_jaccard_identity(
        sr in prop::collection::vec(prop::bool::ANY, 48),
        gt in prop::collection::vec(prop::bool::ANY, 48),
    ) {
        let to_mask = |v: &[bool]| {
            Tensor::from_vec(
                Shape::new(1, 1, 6, 8),
                v.iter().map(|&b| if b { 1.0f64 } else { 0.0 }).collect(),
            )
        };
        let (c, m) = compute_metrics(&to_mask(&sr), &to_mask(&gt)).unwrap();
        // |GT| + |SR| = |union| + |intersection| as exact integers
        prop_assert_eq!((c.tp + c.fn_) + (c.tp + c.fp), (c.tp + c.fp + c.fn_) + c.tp);
        if c.tp + c.fp + c.fn_ > 0 {
            prop_assert!((m.dsc - 2.0 * m.ji / (1.0 + m.ji)).abs() < 1e-12);
        } else {
            prop_assert_eq!((m.dsc, m.ji), (1.0, 1.0));
        }
    }

    #[test]
    fn tensor_dump_load_round_trips(seed in 0u64..500, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let t = Tensor::<f32>::normal_from(Shape::new(1, c, h, w), &mut donet::rng::Rng::new(seed), 0.0, 2.0);
        let mut buf = Vec::new();
        t.dump(&mut buf).unwrap();
        let back: Tensor<f32> = Tensor::load(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(t, back);
    }
}
