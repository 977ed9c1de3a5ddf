use donet::kernels::{self, ConvGeom};
use donet::{Shape, Tensor, Init};
use std::time::Instant;

fn bench(xs: Shape, oc: usize, reps: usize) {
    let ws = Shape::new(oc, xs.c, 3, 3);
    let g = ConvGeom::same(3, 1);
    let x: Tensor<f32> = Tensor::create(xs, Init::Normal{mean:0.0,std:1.0,seed:1}).unwrap();
    let w: Tensor<f32> = Tensor::create(ws, Init::Normal{mean:0.0,std:0.1,seed:2}).unwrap();
    let os = kernels::conv2d_out_shape(xs, ws, g);
    let mut out = vec![0.0f32; os.len()];
    let mut scratch: Vec<f32> = Vec::new();
    let macs = (os.len() * ws.c * 9) as f64;
    let t0 = Instant::now();
    for _ in 0..reps { kernels::conv2d_fwd(x.data(), xs, w.data(), ws, None, g, &mut out, os, &mut scratch); }
    let f = t0.elapsed().as_secs_f64() / reps as f64;
    let dy = out.clone();
    let mut dx = vec![0.0f32; xs.len()];
    let t0 = Instant::now();
    for _ in 0..reps { kernels::conv2d_dx(&dy, os, w.data(), ws, g, &mut dx, xs, &mut scratch); }
    let dxt = t0.elapsed().as_secs_f64() / reps as f64;
    let mut dw = vec![0.0f32; ws.len()];
    let t0 = Instant::now();
    for _ in 0..reps { kernels::conv2d_dw_db(x.data(), xs, &dy, os, ws, g, &mut dw, None, &mut scratch); }
    let dwt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{xs:?} oc={oc}: fwd {:.2} GMAC/s  dx {:.2}  dw {:.2}", macs/f/1e9, macs/dxt/1e9, macs/dwt/1e9);
}

fn main() {
    bench(Shape::new(2, 16, 64, 64), 16, 20);
    bench(Shape::new(2, 32, 32, 32), 32, 20);
    bench(Shape::new(2, 64, 16, 16), 64, 20);
    bench(Shape::new(2, 128, 8, 8), 128, 20);
    bench(Shape::new(2, 80, 64, 64), 16, 5);
}
