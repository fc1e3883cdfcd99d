//! Hessian-vector and mixed-partial-vector products by double backward.

use crate::error::{AutodiffError, Result};
use crate::graph::{grad, Var};
use crate::tensor::Tensor;

/// `Σ_i ⟨g_i, v_i⟩` with the `v_i` entering as constants.
fn contract(grads: &[Var], v: &[Tensor]) -> Result<Var> {
    let graph = grads
        .first()
        .map(|g| g.graph().clone())
        .ok_or_else(|| AutodiffError::InvalidShape {
            op: "hvp",
            shape: vec![],
            reason: "empty parameter list".into(),
        })?;
    let mut acc: Option<Var> = None;
    for (g, vi) in grads.iter().zip(v) {
        if g.value().shape() != vi.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "hvp",
                lhs: g.shape(),
                rhs: vi.shape().to_vec(),
            });
        }
        let term = g.mul(&graph.constant(vi.clone()))?.sum()?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| AutodiffError::InvalidShape {
        op: "hvp",
        shape: vec![],
        reason: "empty parameter list".into(),
    })
}

fn values(vars: Vec<Var>) -> Vec<Tensor> {
    vars.into_iter().map(|v| (*v.value()).clone()).collect()
}

/// `(∂²f/∂θ²)·v`.
pub fn hvp(f: &Var, theta: &[Var], v: &[Tensor]) -> Result<Vec<Tensor>> {
    check_lengths(theta, v)?;
    let g = grad(f, theta, true)?;
    let s = contract(&g, v)?;
    Ok(values(grad(&s, theta, false)?))
}

/// `(∂²f/∂φ∂θ)·v`, i.e. the gradient in `φ` of `⟨∇_θ f, v⟩`.
pub fn mixed_hvp(f: &Var, theta: &[Var], phi: &[Var], v: &[Tensor]) -> Result<Vec<Tensor>> {
    check_lengths(theta, v)?;
    let g = grad(f, theta, true)?;
    let s = contract(&g, v)?;
    Ok(values(grad(&s, phi, false)?))
}

/// Both products from one double-backward pass: `(H_θθ·v, H_φθ·v)`.
pub fn hvp_and_mixed(
    f: &Var,
    theta: &[Var],
    phi: &[Var],
    v: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    check_lengths(theta, v)?;
    let g = grad(f, theta, true)?;
    let s = contract(&g, v)?;
    let all: Vec<Var> = theta.iter().chain(phi).cloned().collect();
    let mut out = values(grad(&s, &all, false)?);
    let mixed = out.split_off(theta.len());
    Ok((out, mixed))
}

fn check_lengths(theta: &[Var], v: &[Tensor]) -> Result<()> {
    if theta.len() != v.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "hvp",
            lhs: vec![theta.len()],
            rhs: vec![v.len()],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn diagonal_quadratic() {
        let g = Graph::new();
        let th = g.param(Tensor::new(&[2], vec![0.3, -0.7]).unwrap());
        let d = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let f = th.mul(&th).unwrap().mul(&d).unwrap().sum().unwrap().scale(0.5);
        let h = hvp(&f, &[th.clone()], &[Tensor::ones(&[2])]).unwrap();
        assert_eq!(h[0].data(), &[1.0, 2.0]);
        let h0 = hvp(&f, &[th], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(h0[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn bilinear_mixed() {
        // f = φ · aᵀθ  =>  ∂²f/∂φ∂θ · v = aᵀv
        let g = Graph::new();
        let a = g.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let th = g.param(Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        let phi = g.param(Tensor::scalar(1.7));
        let f = a.mul(&th).unwrap().sum().unwrap().mul(&phi).unwrap();
        let v = Tensor::new(&[3], vec![2.0, 1.0, 4.0]).unwrap();
        let m = mixed_hvp(&f, &[th.clone()], &[phi.clone()], &[v]).unwrap();
        assert!((m[0].item() - 2.0).abs() < 1e-15);

        let indep = a.mul(&th).unwrap().sum().unwrap();
        let m0 = mixed_hvp(&indep, &[th], &[phi], &[Tensor::ones(&[3])]).unwrap();
        assert_eq!(m0[0].item(), 0.0);
    }
}
