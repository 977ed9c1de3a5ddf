//! The loss family on a toy prediction/target pair, plus the three-headed
//! combined objective on a simulated dual prediction.

use donet::graph::GradGraph;
use donet::losses::{
    combined_objective, dice_loss, focal_loss, focal_tversky_loss, tversky_index, tversky_loss,
    LossParams, ObjectiveConfig,
};
use donet::shape::Shape;
use donet::tensor::Tensor;

fn main() {
    let p = LossParams::default();
    let yhat = vec![0.9, 0.8, 0.3, 0.1, 0.7, 0.4];
    let y = vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
    let shape = Shape::new(1, 1, 1, 6);

    let mut g: GradGraph<f64> = GradGraph::new();
    let yh = g.leaf(Tensor::from_vec(shape, yhat.clone()));
    let t = g.leaf(Tensor::from_vec(shape, y.clone()));

    let dl = dice_loss(&mut g, yh, t, p.epsilon);
    let ti = tversky_index(&mut g, yh, t, p.alpha, p.beta, p.epsilon);
    let tl = tversky_loss(&mut g, yh, t, &p);
    let ftl = focal_tversky_loss(&mut g, yh, t, &p);
    let fl = focal_loss(&mut g, yh, t, p.focal_gamma, p.focal_alpha);
    println!("prediction {yhat:?}");
    println!("target     {y:?}");
    println!("dice loss          = {:.6}", g.scalar_value(dl));
    println!("tversky index      = {:.6} (alpha {}, beta {})", g.scalar_value(ti), p.alpha, p.beta);
    println!("tversky loss       = {:.6}", g.scalar_value(tl));
    println!("focal tversky loss = {:.6} (gamma {})", g.scalar_value(ftl), p.gamma);
    println!("focal loss         = {:.6}", g.scalar_value(fl));

    // the dual objective over a decoder pair and their product
    let y2 = g.leaf(Tensor::from_vec(shape, vec![0.95, 0.6, 0.2, 0.2, 0.8, 0.5]));
    let joint = g.hadamard(yh, y2);
    let cfg = ObjectiveConfig::default();
    let lv = combined_objective(&mut g, &cfg, yh, Some(y2), joint, t);
    println!(
        "combined: l1 {:.4} + l2 {:.4} + lf {:.4} = total {:.4}",
        g.scalar_value(lv.l1),
        g.scalar_value(lv.l2.unwrap()),
        g.scalar_value(lv.lf),
        g.scalar_value(lv.total)
    );
}
