//! The propagation rules checked against closed-form oracles.
//!
//! cargo run --example rule_oracles

use attnlrp::eval::shapley_oracle_product;
use attnlrp::rules::{self, SoftmaxDiagnostic};
use attnlrp::{tensor, Tensor};

fn main() -> attnlrp::Result<()> {
    let xs = [1.5, -0.4, 2.0, 0.7];
    let product: f64 = xs.iter().product();
    let uniform: Vec<f64> = rules::uniform_product(xs.len(), &Tensor::scalar(product))
        .iter()
        .map(|t| t.data()[0])
        .collect();
    println!("uniform split {uniform:.4?}");
    println!("exact Shapley {:.4?}", shapley_oracle_product(&xs)?);

    let a = tensor::softmax(&Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 0.0, 0.5]]), 1, 1.0)?;
    let v = Tensor::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.1], vec![0.4, 0.9]]);
    let o = tensor::matmul(&a, &v)?;
    let (ra, rv, _) = rules::matmul_bilinear(&a, &v, &o, &o, 1e-9)?;
    let (na, nv, _) = rules::matmul_naive_epsilon(&a, &v, &o, &o, 1e-9)?;
    println!(
        "matmul layer sums / output: bilinear {:.6}, naive ε {:.6}",
        (ra.sum() + rv.sum()) / o.sum(),
        (na.sum() + nv.sum()) / o.sum()
    );

    let x = Tensor::from_rows(&[vec![0.0, 1.2, -0.5, 3.0]]);
    let s = tensor::softmax(&x, 1, 1.0)?;
    let r = Tensor::from_rows(&[vec![0.2, 1.0, 0.0, -0.3]]);
    let (taylor, absorbed) = rules::softmax_taylor(&x, &s, &r, 1.0)?;
    println!("softmax Taylor R_in {:.4?}, absorbed {absorbed:.4}", taylor.data());
    let (zp, _) = rules::softmax_zplus(&x, &s, &r, 1.0)?;
    println!("softmax z⁺     R_in {:.4?}", zp.data());
    for mode in [SoftmaxDiagnostic::Identity, SoftmaxDiagnostic::DistributeBias, SoftmaxDiagnostic::StopFlow] {
        let (d, _) = rules::softmax_diagnostic(&x, &s, &r, 1.0, mode)?;
        println!("{mode:?} R_in {:.4?}", d.data());
    }

    let w = Tensor::from_rows(&[vec![1.0, -1.0, 2.0]]);
    let xin = Tensor::from_rows(&[vec![1.0, 2.0, 1.0]]);
    let rout = Tensor::from_rows(&[vec![5.0]]);
    for gamma in [0.0, 0.25, 1e9] {
        let (g, _) = rules::gamma_linear(&w, None, &xin, &rout, gamma, 1e-6)?;
        println!("γ = {gamma:<6} R_in {:.4?}", g.data());
    }
    Ok(())
}
