//! Confusion counting and the five criteria on toy masks, ending with the
//! dataset CSV format.

use donet::metrics::{binarize, compute_metrics, metrics_csv};
use donet::shape::Shape;
use donet::tensor::Tensor;

fn main() {
    // 4x4 case: ground truth 4 positives, prediction 6 with 3 overlapping
    let mut gt = vec![0.0f64; 16];
    let mut pred = vec![0.0f64; 16];
    for i in 0..4 {
        gt[i] = 1.0;
    }
    for i in 1..7 {
        pred[i] = 0.6 + 0.05 * i as f64; // probabilities above threshold
    }
    let shape = Shape::new(1, 1, 4, 4);
    let probs = Tensor::from_vec(shape, pred);
    let gt = Tensor::from_vec(shape, gt);

    let sr = binarize(&probs, 0.5).unwrap();
    let (counts, m) = compute_metrics(&sr, &gt).unwrap();
    println!("tp {} fp {} fn {} tn {}", counts.tp, counts.fp, counts.fn_, counts.tn);
    println!("dsc {:.4}  ji {:.4}  recall {:.4}  precision {:.4}  accuracy {:.4}", m.dsc, m.ji, m.recall, m.precision, m.accuracy);
    println!("identity: 2*ji/(1+ji) = {:.4}", 2.0 * m.ji / (1.0 + m.ji));

    let rows = vec![("img_000".to_string(), m), ("img_001".to_string(), m)];
    println!("\n{}", metrics_csv(&rows));
}
