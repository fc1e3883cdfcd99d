//! Finite-difference oracles and the seeded verification suites built on them.
//!
//! The oracles only evaluate forward values, so they stay independent of the
//! backward rules they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{grad, Graph, Var};
use crate::kernels::ConvGeom;
use crate::second_order::{hvp, mixed_hvp};
use crate::tensor::Tensor;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, and 0 when both are zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error between two lists of tensors, flattened together.
pub fn rel_err_tensors(a: &[Tensor], b: &[Tensor]) -> f64 {
    let fa: Vec<f64> = a.iter().flat_map(|t| t.data().iter().copied()).collect();
    let fb: Vec<f64> = b.iter().flat_map(|t| t.data().iter().copied()).collect();
    rel_err(&fa, &fb)
}

/// Central differences of a scalar function of several tensors.
pub fn fd_gradient<F>(f: F, at: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut point: Vec<Tensor> = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let mut g = Tensor::zeros(at[i].shape());
        for j in 0..at[i].len() {
            let orig = at[i].data()[j];
            point[i].data_mut()[j] = orig + eps;
            let up = f(&point)?;
            point[i].data_mut()[j] = orig - eps;
            let down = f(&point)?;
            point[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// `(G(x + εv) − G(x − εv)) / 2ε` for a vector-valued `G`.
pub fn fd_directional<G>(g: G, at: &[Tensor], v: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    let shift = |sign: f64| -> Result<Vec<Tensor>> {
        at.iter().zip(v).map(|(x, d)| x.axpy(sign * eps, d)).collect()
    };
    let up = g(&shift(1.0)?)?;
    let down = g(&shift(-1.0)?)?;
    up.iter()
        .zip(&down)
        .map(|(u, d)| Ok(u.sub(d)?.scale(1.0 / (2.0 * eps))))
        .collect()
}

/// Outcome of one seeded oracle comparison.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub suite: &'static str,
    pub op: &'static str,
    pub seed: u64,
    pub error: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

type Build = fn(&Graph, &[Var]) -> Result<Var>;

/// A differentiable function of several inputs, with input shapes and an
/// input sampler that keeps away from non-differentiable points.
struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    sample: fn(&mut ChaCha8Rng) -> f64,
    build: Build,
}

fn normal_ish(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.5..1.5)
}

fn positive(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0.3..2.0)
}

fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let m: f64 = rng.gen_range(0.2..1.5);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Rejection sampling away from the ReLU6 kinks at 0 and 6.
fn relu6_range(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x: f64 = rng.gen_range(-2.0..8.0);
        if x.abs() > 1e-3 && (x - 6.0).abs() > 1e-3 {
            return x;
        }
    }
}

const S1: ConvGeom = ConvGeom { stride: 1, padding: 1 };
const S2: ConvGeom = ConvGeom { stride: 2, padding: 1 };
const P0: ConvGeom = ConvGeom { stride: 1, padding: 0 };

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], sample: normal_ish, build: |_, v| v[0].add(&v[1]) },
        OpCase { name: "sub", shapes: &[&[3, 4], &[3, 4]], sample: normal_ish, build: |_, v| v[0].sub(&v[1]) },
        OpCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], sample: normal_ish, build: |_, v| v[0].mul(&v[1]) },
        OpCase { name: "div", shapes: &[&[5], &[5]], sample: away_from_zero, build: |_, v| v[0].div(&v[1]) },
        OpCase { name: "scale", shapes: &[&[6]], sample: normal_ish, build: |_, v| Ok(v[0].scale(-2.5)) },
        OpCase { name: "exp", shapes: &[&[6]], sample: normal_ish, build: |_, v| Ok(v[0].exp()) },
        OpCase { name: "ln", shapes: &[&[6]], sample: positive, build: |_, v| Ok(v[0].ln()) },
        OpCase { name: "recip", shapes: &[&[6]], sample: away_from_zero, build: |_, v| Ok(v[0].recip()) },
        OpCase { name: "relu", shapes: &[&[8]], sample: away_from_zero, build: |_, v| Ok(v[0].relu()) },
        OpCase { name: "relu6", shapes: &[&[10]], sample: relu6_range, build: |_, v| Ok(v[0].relu6()) },
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], sample: normal_ish, build: |_, v| v[0].matmul(&v[1]) },
        OpCase { name: "matmul_ta", shapes: &[&[4, 3], &[4, 2]], sample: normal_ish, build: |_, v| v[0].matmul_t(&v[1], true, false) },
        OpCase { name: "matmul_tb", shapes: &[&[3, 4], &[2, 4]], sample: normal_ish, build: |_, v| v[0].matmul_t(&v[1], false, true) },
        OpCase { name: "matmul_tab", shapes: &[&[4, 3], &[2, 4]], sample: normal_ish, build: |_, v| v[0].matmul_t(&v[1], true, true) },
        OpCase { name: "reshape", shapes: &[&[2, 6]], sample: normal_ish, build: |_, v| v[0].reshape(&[3, 4]) },
        OpCase { name: "broadcast_to", shapes: &[&[2, 1, 3]], sample: normal_ish, build: |_, v| v[0].broadcast_to(&[2, 4, 3]) },
        OpCase { name: "sum_to", shapes: &[&[2, 4, 3]], sample: normal_ish, build: |_, v| v[0].sum_to(&[1, 4, 1]) },
        OpCase { name: "sum", shapes: &[&[2, 3]], sample: normal_ish, build: |_, v| v[0].sum() },
        OpCase { name: "conv2d", shapes: &[&[2, 2, 4, 4], &[3, 2, 3, 3]], sample: normal_ish, build: |_, v| v[0].conv2d(&v[1], S1) },
        OpCase { name: "conv2d_stride2", shapes: &[&[1, 2, 5, 5], &[2, 2, 3, 3]], sample: normal_ish, build: |_, v| v[0].conv2d(&v[1], S2) },
        OpCase { name: "conv2d_pointwise", shapes: &[&[2, 3, 3, 3], &[2, 3, 1, 1]], sample: normal_ish, build: |_, v| v[0].conv2d(&v[1], P0) },
        OpCase { name: "bilinear_up", shapes: &[&[1, 2, 3, 2]], sample: normal_ish, build: |_, v| v[0].bilinear_resize(5, 4) },
        OpCase { name: "bilinear_down", shapes: &[&[1, 2, 5, 6]], sample: normal_ish, build: |_, v| v[0].bilinear_resize(3, 2) },
        OpCase { name: "avg_pool2", shapes: &[&[2, 2, 4, 4]], sample: normal_ish, build: |_, v| v[0].avg_pool2() },
        OpCase { name: "global_avg_pool", shapes: &[&[2, 3, 3, 2]], sample: normal_ish, build: |_, v| v[0].global_avg_pool() },
        OpCase { name: "softmax", shapes: &[&[3, 5]], sample: normal_ish, build: |_, v| v[0].softmax() },
        OpCase { name: "log_softmax", shapes: &[&[3, 5]], sample: normal_ish, build: |_, v| v[0].log_softmax() },
        OpCase { name: "cross_entropy", shapes: &[&[4, 5]], sample: normal_ish, build: |_, v| v[0].cross_entropy(&[0, 3, 4, 1]) },
    ]
}

fn sample_inputs(case: &OpCase, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    case.shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| (case.sample)(rng)))
        .collect()
}

fn projection_for(out_shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(out_shape, |_| rng.gen_range(-1.0..1.0))
}

fn projected(graph: &Graph, case: &OpCase, inputs: &[Var], r: &Tensor) -> Result<Var> {
    let out = (case.build)(graph, inputs)?;
    out.mul(&graph.constant(r.clone()))?.sum()
}

/// Gradient oracle: reverse-mode gradient of a random scalar projection of
/// every operation against central differences with step `eps`.
pub fn gradcheck_suite(seeds: u64, eps: f64, tolerance: f64) -> Result<Vec<CaseReport>> {
    let mut reports = Vec::new();
    for case in op_cases() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            let inputs = sample_inputs(&case, &mut rng);
            let out_shape = {
                let g = Graph::new();
                let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
                (case.build)(&g, &vars)?.shape()
            };
            let r = projection_for(&out_shape, &mut rng);

            let g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let f = projected(&g, &case, &vars, &r)?;
            let analytic: Vec<Tensor> = grad(&f, &vars, false)?
                .into_iter()
                .map(|v| (*v.value()).clone())
                .collect();
            let numeric = fd_gradient(
                |xs| {
                    let g = Graph::new();
                    let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
                    Ok(projected(&g, &case, &vars, &r)?.value().item())
                },
                &inputs,
                eps,
            )?;
            reports.push(CaseReport {
                suite: "gradcheck",
                op: case.name,
                seed,
                error: rel_err_tensors(&analytic, &numeric),
                tolerance,
            });
        }
    }
    Ok(reports)
}

/// Smooth scalar test functions of `(θ, φ)` for the second-order suites.
struct SmoothCase {
    name: &'static str,
    theta: &'static [&'static [usize]],
    phi: &'static [&'static [usize]],
    build: fn(&Graph, &[Var], &[Var]) -> Result<Var>,
}

fn smooth_cases() -> Vec<SmoothCase> {
    vec![
        SmoothCase {
            name: "poly_exp",
            theta: &[&[4]],
            phi: &[&[4]],
            build: |_, t, p| t[0].mul(&t[0])?.mul(&p[0])?.add(&t[0].mul(&p[0].exp())?)?.sum(),
        },
        SmoothCase {
            name: "matmul_softmax",
            theta: &[&[3, 4]],
            phi: &[&[2, 3]],
            build: |_, t, p| {
                let y = p[0].matmul(&t[0])?.softmax()?;
                y.mul(&y)?.sum()
            },
        },
        SmoothCase {
            name: "conv_square",
            theta: &[&[2, 2, 3, 3]],
            phi: &[&[1, 2, 4, 4]],
            build: |_, t, p| {
                let y = p[0].conv2d(&t[0], S1)?;
                y.mul(&y)?.mul(&p[0].conv2d(&t[0], S1)?.exp())?.mean()
            },
        },
        SmoothCase {
            name: "resize_pool",
            theta: &[&[1, 2, 4, 4]],
            phi: &[&[1, 2, 1, 1]],
            build: |_, t, p| {
                let up = t[0].bilinear_resize(6, 5)?;
                let w = p[0].broadcast_to(&[1, 2, 6, 5])?;
                let z = up.mul(&w)?.bilinear_resize(4, 4)?.avg_pool2()?;
                z.mul(&z)?.mul(&z)?.sum()
            },
        },
        SmoothCase {
            name: "cross_entropy",
            theta: &[&[3, 4]],
            phi: &[&[2, 3]],
            build: |_, t, p| p[0].matmul(&t[0])?.mul(&p[0].matmul(&t[0])?)?.cross_entropy(&[1, 3]),
        },
        SmoothCase {
            name: "relu_square_gap",
            theta: &[&[1, 3, 2, 2]],
            phi: &[&[1, 3]],
            build: |_, t, p| {
                let r = t[0].relu();
                let r2 = r.mul(&r)?.global_avg_pool()?;
                r2.mul(&p[0].softmax()?)?.sum()
            },
        },
        SmoothCase {
            name: "ln_recip",
            theta: &[&[5]],
            phi: &[&[5]],
            build: |_, t, p| {
                let pos = t[0].mul(&t[0])?.exp();
                pos.ln().mul(&p[0])?.add(&pos.recip().mul(&p[0].mul(&p[0])?)?)?.sum()
            },
        },
    ]
}

fn sample_case(case: &SmoothCase, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>) {
    // relu_square_gap samples θ away from the kink so the FD step never crosses it.
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        if case.name == "relu_square_gap" {
            away_from_zero(rng)
        } else {
            rng.gen_range(-1.0..1.0)
        }
    };
    let th = case.theta.iter().map(|s| Tensor::from_fn(s, |_| draw(rng))).collect();
    let ph = case.phi.iter().map(|s| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0))).collect();
    (th, ph)
}

fn grads_at(case: &SmoothCase, th: &[Tensor], ph: &[Tensor], wrt_phi: bool) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let tv: Vec<Var> = th.iter().map(|t| g.param(t.clone())).collect();
    let pv: Vec<Var> = ph.iter().map(|t| g.param(t.clone())).collect();
    let f = (case.build)(&g, &tv, &pv)?;
    let wrt = if wrt_phi { &pv } else { &tv };
    Ok(grad(&f, wrt, false)?
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect())
}

/// Second-order oracle: `hvp` and `mixed_hvp` against finite differences of
/// reverse-mode gradients, plus the symmetry of `⟨u, H v⟩`.
pub fn hvpcheck_suite(seeds: u64, eps: f64, tolerance: f64, symmetry_tol: f64) -> Result<Vec<CaseReport>> {
    let mut reports = Vec::new();
    for case in smooth_cases() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) + 17);
            let (th, ph) = sample_case(&case, &mut rng);
            let v: Vec<Tensor> = th.iter().map(|t| Tensor::from_fn(t.shape(), |_| rng.gen_range(-1.0..1.0))).collect();
            let u: Vec<Tensor> = th.iter().map(|t| Tensor::from_fn(t.shape(), |_| rng.gen_range(-1.0..1.0))).collect();

            let g = Graph::new();
            let tv: Vec<Var> = th.iter().map(|t| g.param(t.clone())).collect();
            let pv: Vec<Var> = ph.iter().map(|t| g.param(t.clone())).collect();
            let f = (case.build)(&g, &tv, &pv)?;
            let hv = hvp(&f, &tv, &v)?;
            let hu = hvp(&f, &tv, &u)?;
            let mv = mixed_hvp(&f, &tv, &pv, &v)?;

            let fd_h = fd_directional(|x| grads_at(&case, x, &ph, false), &th, &v, eps)?;
            let fd_m = fd_directional(|x| grads_at(&case, x, &ph, true), &th, &v, eps)?;
            reports.push(CaseReport { suite: "hvp", op: case.name, seed, error: rel_err_tensors(&hv, &fd_h), tolerance });
            reports.push(CaseReport { suite: "mixed_hvp", op: case.name, seed, error: rel_err_tensors(&mv, &fd_m), tolerance });

            let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a.dot(b)).sum::<Result<f64>>()?;
            let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a.dot(b)).sum::<Result<f64>>()?;
            reports.push(CaseReport {
                suite: "hvp_symmetry",
                op: case.name,
                seed,
                error: (uhv - vhu).abs() / uhv.abs().max(vhu.abs()).max(1.0),
                tolerance: symmetry_tol,
            });
        }
    }
    Ok(reports)
}
