//! SGD with momentum, Adam, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// `½(1 + cos(πt/T))·base`.
pub fn cosine_lr(t: f64, t_max: f64, base: f64) -> f64 {
    if t_max <= 0.0 {
        return base;
    }
    0.5 * (1.0 + (PI * t.clamp(0.0, t_max) / t_max).cos()) * base
}

fn check_alignment(params: &ParamSet, grads: &ParamSet, buf: &ParamSet) -> Result<()> {
    for ((name, p), (g, b)) in params.iter().zip(grads.tensors().zip(buf.tensors())) {
        if p.shape() != g.shape() || p.shape() != b.shape() {
            return Err(Error::Spec(format!(
                "{name}: parameter {:?}, gradient {:?}, buffer {:?}",
                p.shape(),
                g.shape(),
                b.shape()
            )));
        }
    }
    if params.len() != grads.len() || params.len() != buf.len() {
        return Err(Error::Spec("optimizer state does not match parameters".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: ParamSet,
}

impl SgdState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }

    /// `v ← μv + (g + wd·p)`, `p ← p − lr·v` (weight decay coupled into the gradient).
    pub fn step(&mut self, cfg: &SgdConfig, lr: f64, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        check_alignment(params, grads, &self.velocity)?;
        for ((p, g), v) in params
            .iter_mut()
            .map(|(_, p)| p)
            .zip(grads.tensors())
            .zip(self.velocity.iter_mut().map(|(_, v)| v))
        {
            let pd = p.data_mut();
            for ((pi, &gi), vi) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gi + cfg.weight_decay * *pi;
                *vi = cfg.momentum * *vi + d;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Bias-corrected Adam; weight decay (if any) is added to the gradient.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        check_alignment(params, grads, &self.m)?;
        check_alignment(params, grads, &self.v)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let ms = self.m.iter_mut().map(|(_, m)| m);
        let vs = self.v.iter_mut().map(|(_, v)| v);
        for (((p, g), m), v) in params.iter_mut().map(|(_, p)| p).zip(grads.tensors()).zip(ms).zip(vs) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((pi, &gi), mi), vi) in it {
                let gi = gi + cfg.weight_decay * *pi;
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use l2tww_autodiff::Tensor;

    fn scalar_set(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(&[1], vec![x]).unwrap());
        p
    }

    fn val(p: &ParamSet) -> f64 {
        p.get("x").unwrap().data()[0]
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.0, 200.0, 0.1), 0.1);
        assert!(cosine_lr(200.0, 200.0, 0.1).abs() < 1e-18);
        assert!((cosine_lr(100.0, 200.0, 0.1) - 0.05).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let lr = cosine_lr(t as f64, 50.0, 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0 };
        let mut p = scalar_set(2.0);
        let mut st = SgdState::new(&p);
        st.step(&cfg, 0.1, &mut p, &scalar_set(3.0)).unwrap();
        assert!((val(&p) - 1.7).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0 };
        let mut p = scalar_set(2.0);
        let mut st = SgdState::new(&p);
        st.step(&cfg, 0.1, &mut p, &scalar_set(0.0)).unwrap();
        assert_eq!(val(&p), 2.0);
    }

    #[test]
    fn sgd_momentum_matches_scalar_recurrence() {
        // f(x) = ½ a x², g = a x; hand recurrence with coupled weight decay
        let (a, mu, wd, lr) = (3.0, 0.9, 1e-2, 0.05);
        let cfg = SgdConfig { momentum: mu, weight_decay: wd };
        let mut p = scalar_set(1.5);
        let mut st = SgdState::new(&p);
        let (mut x, mut v) = (1.5f64, 0.0f64);
        for _ in 0..2 {
            let g = scalar_set(a * val(&p));
            st.step(&cfg, lr, &mut p, &g).unwrap();
            v = mu * v + (a * x + wd * x);
            x -= lr * v;
        }
        assert!((val(&p) - x).abs() < 1e-15);
        // written out: x1 = 1.5 − 0.05·(4.5+0.015) = 1.27425
        //              v2 = 0.9·4.515 + 3.01·1.27425; x2 = x1 − 0.05·v2
        let x1 = 1.5 - 0.05 * 4.515;
        let x2 = x1 - 0.05 * (0.9 * 4.515 + 3.01 * x1);
        assert!((val(&p) - x2).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_bounded_by_lr() {
        let cfg = AdamConfig::default();
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[4], vec![0.0, 1.0, -2.0, 5.0]).unwrap());
        let before = p.clone();
        let mut g = ParamSet::new();
        g.insert("w", Tensor::new(&[4], vec![1e-3, -50.0, 7.0, 0.2]).unwrap());
        let mut st = AdamState::new(&p);
        st.step(&cfg, &mut p, &g).unwrap();
        for (a, b) in p.flat().iter().zip(before.flat()) {
            assert!((a - b).abs() <= cfg.lr * (1.0 + 1e-6));
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = AdamConfig::default();
        let mut p = scalar_set(0.7);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            st.step(&cfg, &mut p, &scalar_set(0.0)).unwrap();
        }
        assert_eq!(val(&p), 0.7);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        // f(x) = (x − 2)², g = 2(x − 2)
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = scalar_set(0.0);
        let mut st = AdamState::new(&p);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (val(&p) - 2.0);
            st.step(&cfg, &mut p, &scalar_set(g)).unwrap();
            let gx = 2.0 * (x - 2.0);
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((val(&p) - x).abs() < 1e-15);
        // constant-sign gradient: each bias-corrected step is ≈ lr
        assert!(x > 0.29 && x <= 0.3 + 1e-9, "{x}");
    }
}
