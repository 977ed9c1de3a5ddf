//! Threshold binarization and the five evaluation criteria (dice score,
//! Jaccard index, recall, precision, accuracy), computed per image and
//! macro-averaged over a dataset.
//!
//! Empty-mask conventions: when prediction and ground truth are both
//! empty every metric is 1; when exactly one is empty the overlap scores
//! are 0 and the undefined ratio (recall without ground-truth positives,
//! precision without predicted positives) is reported as 0.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel -> 1 iff value > threshold (ties go to background).
pub fn binarize<S: Scalar>(yhat: &Tensor<S>, threshold: f64) -> Result<Tensor<S>> {
    let t = S::from_f64(threshold);
    for &v in yhat.data() {
        if !(v >= S::ZERO && v <= S::ONE) {
            return Err(Error::Numeric(format!(
                "binarize: probability {v} outside [0,1]"
            )));
        }
    }
    Ok(yhat.map(|v| if v > t { S::ONE } else { S::ZERO }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegmentationMetrics {
    pub dsc: f64,
    pub ji: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
}

impl SegmentationMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
        let gt = tp + fn_;
        let sr = tp + fp;
        let union = tp + fp + fn_;
        let both_empty = gt == 0.0 && sr == 0.0;
        let dsc = if both_empty { 1.0 } else { 2.0 * tp / (gt + sr) };
        let ji = if both_empty { 1.0 } else if union == 0.0 { 1.0 } else { tp / union };
        let recall = if gt == 0.0 { if both_empty { 1.0 } else { 0.0 } } else { tp / gt };
        let precision = if sr == 0.0 { if both_empty { 1.0 } else { 0.0 } } else { tp / sr };
        let accuracy = (tp + tn) / (tp + tn + fp + fn_);
        SegmentationMetrics { dsc, ji, recall, precision, accuracy }
    }
}

/// Count pixel agreement between a predicted and a ground-truth binary
/// mask and derive the five criteria.
pub fn compute_metrics<S: Scalar>(
    sr: &Tensor<S>,
    gt: &Tensor<S>,
) -> Result<(ConfusionCounts, SegmentationMetrics)> {
    if sr.shape() != gt.shape() {
        return Err(Error::Data(format!(
            "metrics: mask shapes differ, {} vs {}",
            sr.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in sr.data().iter().zip(gt.data()) {
        let p1 = if p == S::ONE { true } else if p == S::ZERO { false } else {
            return Err(Error::Data(format!("metrics: non-binary prediction value {p}")));
        };
        let g1 = if g == S::ONE { true } else if g == S::ZERO { false } else {
            return Err(Error::Data(format!("metrics: non-binary ground-truth value {g}")));
        };
        match (p1, g1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let m = SegmentationMetrics::from_counts(&c);
    Ok((c, m))
}

/// Macro-average rows plus a population standard deviation row.
pub fn mean_std(rows: &[SegmentationMetrics]) -> (SegmentationMetrics, SegmentationMetrics) {
    let n = rows.len().max(1) as f64;
    let mut mean = SegmentationMetrics::default();
    for r in rows {
        mean.dsc += r.dsc;
        mean.ji += r.ji;
        mean.recall += r.recall;
        mean.precision += r.precision;
        mean.accuracy += r.accuracy;
    }
    mean.dsc /= n;
    mean.ji /= n;
    mean.recall /= n;
    mean.precision /= n;
    mean.accuracy /= n;
    let mut var = SegmentationMetrics::default();
    for r in rows {
        var.dsc += (r.dsc - mean.dsc).powi(2);
        var.ji += (r.ji - mean.ji).powi(2);
        var.recall += (r.recall - mean.recall).powi(2);
        var.precision += (r.precision - mean.precision).powi(2);
        var.accuracy += (r.accuracy - mean.accuracy).powi(2);
    }
    let std = SegmentationMetrics {
        dsc: (var.dsc / n).sqrt(),
        ji: (var.ji / n).sqrt(),
        recall: (var.recall / n).sqrt(),
        precision: (var.precision / n).sqrt(),
        accuracy: (var.accuracy / n).sqrt(),
    };
    (mean, std)
}

/// CSV schema: header `image,dsc,ji,recall,precision,accuracy`, one row per
/// image, then MEAN and STD rows; six decimal places throughout.
pub fn metrics_csv(rows: &[(String, SegmentationMetrics)]) -> String {
    let mut out = String::from("image,dsc,ji,recall,precision,accuracy\n");
    let fmt = |id: &str, m: &SegmentationMetrics| {
        format!(
            "{id},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.dsc, m.ji, m.recall, m.precision, m.accuracy
        )
    };
    for (id, m) in rows {
        out.push_str(&fmt(id, m));
    }
    let values: Vec<SegmentationMetrics> = rows.iter().map(|(_, m)| *m).collect();
    let (mean, std) = mean_std(&values);
    out.push_str(&fmt("MEAN", &mean));
    out.push_str(&fmt("STD", &std));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::shape::Shape;

    fn mask(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, vals.len()), vals.to_vec())
    }

    #[test]
    fn strict_threshold_convention() {
        let t = binarize(&mask(&[0.49, 0.5, 0.51]), 0.5).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0]);
        let z = binarize(&mask(&[0.0, 0.0]), 0.5).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn binarize_is_idempotent() {
        let x = mask(&[0.2, 0.7, 0.5, 1.0, 0.0]);
        let once = binarize(&x, 0.5).unwrap();
        let twice = binarize(&once, 0.5).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        assert!(binarize(&mask(&[1.2]), 0.5).is_err());
        assert!(binarize(&mask(&[-0.1]), 0.5).is_err());
    }

    #[test]
    fn perfect_agreement_scores_one() {
        let m = mask(&[1.0, 0.0, 1.0, 1.0]);
        let (_, s) = compute_metrics(&m, &m).unwrap();
        assert_eq!(
            (s.dsc, s.ji, s.recall, s.precision, s.accuracy),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn disjoint_nonempty_masks_score_zero_overlap() {
        let sr = mask(&[1.0, 1.0, 0.0, 0.0]);
        let gt = mask(&[0.0, 0.0, 1.0, 1.0]);
        let (_, s) = compute_metrics(&sr, &gt).unwrap();
        assert_eq!((s.dsc, s.ji, s.recall, s.precision), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(s.accuracy, 0.0);
    }

    #[test]
    fn counting_oracle_case() {
        // 4x4: gt has 4 positives, sr has 6 with 3 overlapping
        let mut gt = vec![0.0; 16];
        let mut sr = vec![0.0; 16];
        for i in 0..4 {
            gt[i] = 1.0;
        }
        for i in 1..7 {
            sr[i] = 1.0;
        }
        let gt = Tensor::from_vec(Shape::new(1, 1, 4, 4), gt);
        let sr = Tensor::from_vec(Shape::new(1, 1, 4, 4), sr);
        let (c, s) = compute_metrics(&sr, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 3, 1, 9));
        assert_eq!(s.dsc, 0.6);
        assert!((s.ji - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(s.recall, 0.75);
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.accuracy, 0.75);
    }

    #[test]
    fn empty_mask_conventions() {
        let e = mask(&[0.0, 0.0]);
        let f = mask(&[1.0, 0.0]);
        let (_, both) = compute_metrics(&e, &e).unwrap();
        assert_eq!(
            (both.dsc, both.ji, both.recall, both.precision, both.accuracy),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        let (_, pred_only) = compute_metrics(&f, &e).unwrap();
        assert_eq!((pred_only.dsc, pred_only.ji, pred_only.recall), (0.0, 0.0, 0.0));
        let (_, gt_only) = compute_metrics(&e, &f).unwrap();
        assert_eq!((gt_only.dsc, gt_only.ji, gt_only.precision), (0.0, 0.0, 0.0));
    }

    #[test]
    fn dice_jaccard_identity_holds_exactly() {
        // DSC = 2 JI / (1 + JI) whenever the union is nonempty; the integer
        // identity |GT| + |SR| = |union| + |intersection| backs it
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let n = 24;
            let sr: Vec<f64> = (0..n).map(|_| if rng.coin(0.4) { 1.0 } else { 0.0 }).collect();
            let gt: Vec<f64> = (0..n).map(|_| if rng.coin(0.4) { 1.0 } else { 0.0 }).collect();
            let (c, s) = compute_metrics(&mask(&sr), &mask(&gt)).unwrap();
            let union = c.tp + c.fp + c.fn_;
            if union == 0 {
                continue;
            }
            assert_eq!((c.tp + c.fn_) + (c.tp + c.fp), union + c.tp);
            let derived = 2.0 * s.ji / (1.0 + s.ji);
            assert!((s.dsc - derived).abs() < 1e-12, "{} vs {derived}", s.dsc);
        }
    }

    #[test]
    fn metrics_invariant_under_joint_permutation() {
        let mut rng = Rng::new(23);
        let n = 32;
        let sr: Vec<f64> = (0..n).map(|_| if rng.coin(0.5) { 1.0 } else { 0.0 }).collect();
        let gt: Vec<f64> = (0..n).map(|_| if rng.coin(0.3) { 1.0 } else { 0.0 }).collect();
        let (_, base) = compute_metrics(&mask(&sr), &mask(&gt)).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let srp: Vec<f64> = idx.iter().map(|&i| sr[i]).collect();
        let gtp: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
        let (_, perm) = compute_metrics(&mask(&srp), &mask(&gtp)).unwrap();
        assert_eq!(base, perm);
    }

    #[test]
    fn csv_schema_and_row_count() {
        let rows = vec![
            ("a".to_string(), SegmentationMetrics { dsc: 0.5, ji: 0.25, recall: 1.0, precision: 0.5, accuracy: 0.75 }),
            ("b".to_string(), SegmentationMetrics { dsc: 1.0, ji: 1.0, recall: 1.0, precision: 1.0, accuracy: 1.0 }),
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2 + 2 + 1);
        assert_eq!(lines[0], "image,dsc,ji,recall,precision,accuracy");
        assert_eq!(lines[1], "a,0.500000,0.250000,1.000000,0.500000,0.750000");
        assert!(lines[3].starts_with("MEAN,0.750000,0.625000,"));
        assert!(lines[4].starts_with("STD,0.250000,0.375000,"));
    }
}
