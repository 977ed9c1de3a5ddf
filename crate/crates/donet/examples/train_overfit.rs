//! Overfit a tiny synthetic dataset: the fastest end-to-end sanity check
//! that gradients, losses and the optimizer work together.
//!
//!     cargo run --release --example train_overfit -- [steps]

use donet::data::{generate_synthetic, SyntheticSpec};
use donet::layers::Mode;
use donet::losses::{combined_objective, ObjectiveConfig};
use donet::model::{Donet, DonetConfig};
use donet::rng::Rng;
use donet::tensor::Tensor;
use donet::train::{joint_dsc, sgd_step};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let spec = SyntheticSpec {
        count: 4,
        size: (64, 64),
        area_fraction_range: (0.05, 0.5),
        seed: 7,
        ..SyntheticSpec::default()
    };
    let samples = generate_synthetic::<f32>(&spec).unwrap();
    let cfg = DonetConfig { base_channels: 16, ..DonetConfig::default() };
    let mut model: Donet<f32> = Donet::build(cfg, 7).unwrap();
    let objective = ObjectiveConfig::default();
    println!("parameters: {}", model.parameter_count());

    let batch = 2;
    let steps_per_epoch = samples.len() / batch;
    let t0 = Instant::now();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for step in 0..steps {
        let epoch = step / steps_per_epoch;
        if step % steps_per_epoch == 0 {
            Rng::derive(7, &[0xE0, epoch as u64]).shuffle(&mut order);
        }
        let lr = 0.01 / 10f64.powi((epoch / 160) as i32);
        let take = &order[(step % steps_per_epoch) * batch..][..batch];
        let imgs: Vec<&Tensor<f32>> = take.iter().map(|&i| &samples[i].image).collect();
        let masks: Vec<&Tensor<f32>> = take.iter().map(|&i| &samples[i].mask).collect();
        let (images, targets) = (Tensor::stack(&imgs), Tensor::stack(&masks));
        let triple = model.forward(&images, Mode::Train);
        let g = model.graph_mut();
        let t = g.leaf(targets);
        let lv = combined_objective(g, &objective, triple.y1, Some(triple.y2), triple.y_joint, t);
        let total = g.scalar_value(lv.total);
        g.zero_grad();
        g.backward(lv.total);
        sgd_step(&mut model, lr).unwrap();
        model.truncate();
        if step % 50 == 0 || step + 1 == steps {
            let dsc = joint_dsc(&mut model, &samples).unwrap();
            println!(
                "step {step:>4}  lr {lr:.5}  loss {total:.4}  joint DSC {dsc:.4}  ({:.0}s)",
                t0.elapsed().as_secs_f64()
            );
        }
    }
    let dsc = joint_dsc(&mut model, &samples).unwrap();
    println!("final joint DSC over the 4 samples: {dsc:.4} in {:.0}s", t0.elapsed().as_secs_f64());
}
