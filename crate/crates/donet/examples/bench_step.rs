use donet::layers::Mode;
use donet::losses::{combined_objective, ObjectiveConfig};
use donet::model::{Donet, DonetConfig};
use donet::{Init, Shape, Tensor};
use std::time::Instant;

fn step_time(batch: usize, base: usize, size: usize, reps: usize) -> (f64, f64) {
    let cfg = DonetConfig {
        input_size: (size, size),
        base_channels: base,
        ..DonetConfig::default()
    };
    let mut m: Donet<f32> = Donet::build(cfg, 1).unwrap();
    let img: Tensor<f32> = Tensor::create(
        Shape::new(batch, 3, size, size),
        Init::Normal { mean: 0.5, std: 0.15, seed: 2 },
    ).unwrap().map(|v: f32| v.clamp(0.0, 1.0));
    let tgt: Tensor<f32> = Tensor::create(Shape::new(batch, 1, size, size), Init::Zeros).unwrap()
        .map(|_| if rand_like() { 1.0 } else { 0.0 });
    let obj = ObjectiveConfig::default();
    // warmup + timed
    let mut fwd_t = 0.0;
    let mut tot_t = 0.0;
    for i in 0..reps + 1 {
        m.truncate();
        let t0 = Instant::now();
        let triple = m.forward(&img, Mode::Train);
        let fwd = t0.elapsed().as_secs_f64();
        let g = m.graph_mut();
        let t = g.leaf(tgt.clone());
        let lv = combined_objective(g, &obj, triple.y1, Some(triple.y2), triple.y_joint, t);
        g.zero_grad();
        g.backward(lv.total);
        // mimic sgd: touch every param grad
        let params: Vec<_> = m.parameters().iter().map(|(_, v)| *v).collect();
        for v in params {
            let gr: Vec<f32> = m.graph().grad(v).unwrap_or(&[]).to_vec();
            let lr = 0.01f32;
            let data = m.graph_mut().data_mut(v);
            for (d, gv) in data.iter_mut().zip(&gr) { *d -= lr * gv; }
        }
        let dt = t0.elapsed().as_secs_f64();
        if i > 0 { fwd_t += fwd; tot_t += dt; }
    }
    (fwd_t / reps as f64, tot_t / reps as f64)
}

static mut SEED: u64 = 42;
fn rand_like() -> bool {
    unsafe { SEED = SEED.wrapping_mul(6364136223846793005).wrapping_add(1); (SEED >> 62) & 1 == 1 }
}

fn main() {
    for (batch, base, size) in [(2, 16, 64), (4, 16, 64), (8, 8, 64)] {
        let (f, t) = step_time(batch, base, size, 3);
        println!("batch={batch} base={base} size={size}: fwd {:.2}s  full step {:.2}s  ({:.2}s/img)", f, t, t / batch as f64);
    }
}
