//! Gradients, Hessian-vector and mixed products of a tiny conv classifier,
//! checked against central differences.
//!
//!     cargo run --release -p l2tww --example second_order

use l2tww_autodiff::check::{fd_directional, rel_err_tensors};
use l2tww_autodiff::{grad, hvp, mixed_hvp, ConvGeom, Graph, Result, Tensor, Var};

/// θ = (kernel, head), φ = per-class logit scale.
fn loss(g: &Graph, theta: &[Var], phi: &Var) -> Result<Var> {
    let x = g.constant(Tensor::from_fn(&[2, 1, 5, 5], |i| ((i * 7) % 11) as f64 / 5.0 - 1.0));
    let h = x.conv2d(&theta[0], ConvGeom { stride: 1, padding: 1 })?.relu();
    let logits = h.global_avg_pool()?.matmul(&theta[1])?;
    logits.mul(&phi.broadcast_to(&[2, 3])?)?.cross_entropy(&[0, 2])
}

fn bind(g: &Graph, theta: &[Tensor], phi: &Tensor) -> (Vec<Var>, Var) {
    (theta.iter().map(|t| g.param(t.clone())).collect(), g.param(phi.clone()))
}

fn grad_theta(theta: &[Tensor], phi: &Tensor) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let (t, p) = bind(&g, theta, phi);
    let d = grad(&loss(&g, &t, &p)?, &t, false)?;
    Ok(d.iter().map(|v| (*v.value()).clone()).collect())
}

fn main() -> Result<()> {
    let theta = vec![
        Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.7).sin()),
        Tensor::from_fn(&[2, 3], |i| (i as f64 * 1.3).cos()),
    ];
    let phi = Tensor::from_fn(&[1, 3], |i| 1.0 + 0.1 * i as f64);
    let v = vec![
        Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64).cos()),
        Tensor::from_fn(&[2, 3], |i| 0.5 - i as f64 * 0.2),
    ];

    let g = Graph::new();
    let (t, p) = bind(&g, &theta, &phi);
    let f = loss(&g, &t, &p)?;
    println!("loss {:.6}", f.value().item());

    let h = hvp(&f, &t, &v)?;
    let fd = fd_directional(|at| grad_theta(at, &phi), &theta, &v, 1e-5)?;
    println!("H·v        rel err vs finite differences {:.2e}", rel_err_tensors(&h, &fd));

    let m = mixed_hvp(&f, &t, &[p], &v)?;
    let eps = 1e-5;
    let mut fd_m = Tensor::zeros(&[1, 3]);
    for j in 0..3 {
        let dot = |shift: f64| -> Result<f64> {
            let mut q = phi.clone();
            q.data_mut()[j] += shift;
            let gt = grad_theta(&theta, &q)?;
            Ok(gt.iter().zip(&v).map(|(a, b)| a.dot(b).unwrap()).sum())
        };
        fd_m.data_mut()[j] = (dot(eps)? - dot(-eps)?) / (2.0 * eps);
    }
    println!("∂²f/∂φ∂θ·v rel err vs finite differences {:.2e}", rel_err_tensors(&m, &[fd_m]));
    Ok(())
}
