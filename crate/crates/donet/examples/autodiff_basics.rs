//! Build a small differentiable computation by hand and inspect the
//! gradients, including the product-fusion interaction: for
//! s = sum(y1 .* y2), ds/dy1 = y2 and ds/dy2 = y1.

use donet::graph::GradGraph;
use donet::shape::Shape;
use donet::tensor::Tensor;

fn main() {
    let mut g: GradGraph<f64> = GradGraph::new();

    let y1 = g.param(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.9, 0.6, 0.2]));
    let y2 = g.param(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.8, 0.3, 0.7]));
    let joint = g.hadamard(y1, y2);
    let loss = g.sum_all(joint);
    g.backward(loss);

    println!("joint  = {:?}", g.data(joint));
    println!("d/dy1  = {:?} (equals y2)", g.grad(y1).unwrap());
    println!("d/dy2  = {:?} (equals y1)", g.grad(y2).unwrap());

    // gradients accumulate across backward calls until cleared
    g.backward(loss);
    println!("after a second backward: d/dy1 = {:?}", g.grad(y1).unwrap());
    g.zero_grad();

    // a tiny chain with a nonlinearity
    let x = g.param(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]));
    let s = g.sigmoid(x);
    let l = g.sum_all(s);
    g.backward(l);
    println!("sigmoid({:?}) = {:?}", g.data(x), g.data(s));
    println!("d sigmoid = {:?} (0.25 at x = 0)", g.grad(x).unwrap());
}
