//! The recurrent context block end to end: a dilated bank feeding a
//! ConvLSTM, then the attention-gated multi-scale skip consuming the
//! stored hidden states on the decoder side.

use donet::graph::GradGraph;
use donet::rcem::{MultiScaleSkip, RcemBlock};
use donet::rng::Rng;
use donet::shape::Shape;
use donet::tensor::{Init, Tensor};

fn main() {
    let mut g: GradGraph<f32> = GradGraph::new();
    let mut rng = Rng::new(3);
    let ch = 8;
    let rates = [1usize, 2, 4, 8];

    let block = RcemBlock::new(&mut g, &mut rng, ch, &rates);
    let skip = MultiScaleSkip::new(&mut g, &mut rng, ch, &rates);

    let f = g.leaf(
        Tensor::create(Shape::new(1, ch, 32, 32), Init::Normal { mean: 0.0, std: 1.0, seed: 9 })
            .unwrap(),
    );
    let (h_t, bundle) = block.forward(&mut g, f);
    println!("feature F: {}", g.shape(f));
    println!("context H_T: {} (same spatial extent, fed to the next encoder layer)", g.shape(h_t));
    for (t, &h) in bundle.states.iter().enumerate() {
        println!("  H_{} (rate {}): {}", t + 1, rates[t], g.shape(h));
    }

    // decoder side: R is half resolution, double channels
    let r = g.leaf(
        Tensor::create(Shape::new(1, 2 * ch, 16, 16), Init::Normal { mean: 0.0, std: 1.0, seed: 10 })
            .unwrap(),
    );
    let fused = skip.forward(&mut g, &bundle, r);
    println!("decoder feature R: {}", g.shape(r));
    println!(
        "multi-scale skip output: {} = {} gated states + upsampled R",
        g.shape(fused),
        rates.len()
    );
}
