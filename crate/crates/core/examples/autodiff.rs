//! The tape autodiff engine on its own: logistic regression on a toy problem,
//! with the gradient checked against central differences before training.

use gqs::math::{grad_check_store, Adam, DenseMatrix, Graph, ParamStore};
use gqs::rng;
use rand::Rng;

fn main() -> gqs::Result<()> {
    let mut r = rng::stream(0, "autodiff-example", 0);
    let true_w = [1.5, -2.0, 0.5];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..256 {
        let x: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let z: f64 = x.iter().zip(&true_w).map(|(a, b)| a * b).sum::<f64>() + 0.3;
        ys.push(if r.gen_bool(1.0 / (1.0 + (-z).exp())) { 1.0 } else { 0.0 });
        xs.push(x);
    }
    let x = DenseMatrix::from_rows(&xs)?;
    let y = DenseMatrix::column_vector(ys);

    let mut store = ParamStore::new();
    let w = store.add("w", DenseMatrix::zeros(3, 1));
    let b = store.add("b", DenseMatrix::zeros(1, 1));

    // mean of -[y log σ(z) + (1-y) log σ(-z)]
    let loss_and_grad = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let (xn, yn) = (g.input(x.clone()), g.input(y.clone()));
        let (wn, bn) = (g.param(w), g.param(b));
        let z = g.affine(xn, wn, bn)?;
        let pos = g.log_sigmoid(z);
        let neg_z = g.scale(z, -1.0);
        let neg = g.log_sigmoid(neg_z);
        let a = g.mul(yn, pos)?;
        let one_minus_y = g.input(y.map(|v| 1.0 - v));
        let c = g.mul(one_minus_y, neg)?;
        let ll = g.add(a, c)?;
        let total = g.sum(ll)?;
        let loss = g.scale(total, -1.0 / x.rows() as f64);
        Ok((g.value(loss).item(), g.backward(loss)?))
    };

    println!(
        "gradient check, worst relative error {:.2e}",
        grad_check_store(&store, 1e-6, loss_and_grad)?
    );

    let mut adam = Adam::new(&store, 0.1);
    for step in 0..=200 {
        let (loss, grads) = loss_and_grad(&store)?;
        if step % 50 == 0 {
            println!("step {step:>3} loss {loss:.4}");
        }
        adam.step(&mut store, &grads)?;
    }
    println!(
        "fitted w {:?} b {:.3} (true {true_w:?}, 0.3)",
        store.get(w).data(),
        store.get(b).item()
    );
    Ok(())
}
