//! Checks analytic gradients of a small graph against central differences.

use l2tlab::tensor::{finite_diff_grad, max_relative_error, Graph, Tensor};

fn loss(x: &Tensor, w: &Tensor, targets: &[usize]) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let wv = g.leaf(w, true);
    let h = g.matmul(xv, wv).unwrap();
    let h = g.gelu(h).unwrap();
    let l = g.cross_entropy_weighted(h, targets, &[1.0, 0.5, 2.0]).unwrap();
    let grads = g.backward(l).unwrap();
    (g.value(l).item(), vec![grads.get(xv), grads.get(wv)])
}

fn main() {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.5], vec![-0.8, 0.9, 0.2]]).unwrap();
    let w = Tensor::from_rows(&[vec![0.5, -0.3, 0.8, 0.1], vec![-0.6, 0.2, 0.4, 0.9], vec![0.3, 0.7, -0.2, -0.4]])
        .unwrap();
    let targets = [2, 0, 3];
    let (value, analytic) = loss(&x, &w, &targets);
    let numeric = finite_diff_grad(|p| loss(&p[0], &p[1], &targets).0, &[x, w], 1e-5);
    for (name, (a, n)) in ["x", "w"].iter().zip(analytic.iter().zip(&numeric)) {
        println!("d loss / d {name}: max relative error {:.2e}", max_relative_error(a.data(), n.data()));
    }
    println!("loss = {value:.6}");
}
