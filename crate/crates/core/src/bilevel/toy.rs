//! Small smooth bilevel problems with known structure, for checking hypergradients.

use l2tww_autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bilevel::Objective;
use crate::error::Result;
use crate::params::{Bound, ParamSet};

/// `θ, φ ∈ ℝ`, `L_wfm = φθ²`, `L_org = (θ − 1)²`.
pub struct ScalarToy {
    pub beta: f64,
}

impl ScalarToy {
    pub fn params(theta: f64, phi: f64) -> (ParamSet, ParamSet) {
        let mut t = ParamSet::new();
        t.insert("theta", Tensor::new(&[1], vec![theta]).expect("one value"));
        let mut p = ParamSet::new();
        p.insert("phi", Tensor::new(&[1], vec![phi]).expect("one value"));
        (t, p)
    }
}

impl Objective for ScalarToy {
    fn org(&self, g: &Graph, theta: &Bound) -> Result<Var> {
        let one = g.constant(Tensor::ones(&[1]));
        Ok(theta.get("theta")?.sub(&one)?.square()?.sum()?)
    }

    fn wfm(&self, _: &Graph, theta: &Bound, phi: &Bound) -> Result<Var> {
        let t = theta.get("theta")?;
        Ok(phi.get("phi")?.mul(&t.square()?)?.sum()?)
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

/// A linear softmax classifier `θ = W [d,c]` as the inner model; the matching
/// loss pulls `W` toward a fixed `S` with channel weights `softmax(φ_logits)`
/// and, optionally, a pair weight `exp(φ_lambda)`.
pub struct LinearToy {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub s: Tensor,
    pub beta: f64,
}

impl LinearToy {
    /// `d×c` weights, `d·c` logits, plus one `λ` parameter when `learn_lambda`.
    pub fn random(seed: u64, d: usize, c: usize, learn_lambda: bool) -> (Self, ParamSet, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 6;
        let x = Tensor::from_fn(&[b, d], |_| rng.gen_range(-1.5..1.5));
        let y = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let s = Tensor::from_fn(&[d, c], |_| rng.gen_range(-1.0..1.0));
        let mut theta = ParamSet::new();
        theta.insert("w", Tensor::from_fn(&[d, c], |_| rng.gen_range(-0.5..0.5)));
        let mut phi = ParamSet::new();
        phi.insert("logits", Tensor::from_fn(&[d * c], |_| rng.gen_range(-1.0..1.0)));
        if learn_lambda {
            phi.insert("lambda", Tensor::new(&[1], vec![rng.gen_range(-0.5..0.5)]).expect("one value"));
        }
        (Self { x, y, s, beta: 0.5 }, theta, phi)
    }
}

impl Objective for LinearToy {
    fn org(&self, g: &Graph, theta: &Bound) -> Result<Var> {
        let logits = g.constant(self.x.clone()).matmul(theta.get("w")?)?;
        Ok(logits.cross_entropy(&self.y)?)
    }

    fn wfm(&self, g: &Graph, theta: &Bound, phi: &Bound) -> Result<Var> {
        let w = theta.get("w")?;
        let n = self.s.len();
        let diff = w.sub(&g.constant(self.s.clone()))?.square()?.reshape(&[n])?;
        let weights = phi.get("logits")?.softmax()?;
        let loss = diff.mul(&weights)?.sum()?.scale(n as f64);
        match phi.get("lambda") {
            Ok(l) => Ok(loss.mul(&l.exp().reshape(&[])?)?),
            Err(_) => Ok(loss),
        }
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}
