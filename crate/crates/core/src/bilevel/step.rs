//! One iteration of the alternating θ / φ updates.

use l2tww_autodiff::{grad, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bilevel::hypergrad::{hypergrad, inner_rollout, Hypergrad, Scheme};
use crate::bilevel::Objective;
use crate::data::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, SgdConfig, SgdState};
use crate::params::{grads_to_set, ParamSet};

/// Inner step size policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InnerLr {
    /// The current scheduled learning rate of `θ`.
    Tied,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilevelConfig {
    pub inner_steps: usize,
    pub inner_lr: InnerLr,
    pub scheme: Scheme,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            inner_steps: 2,
            inner_lr: InnerLr::Tied,
            scheme: Scheme::ThreeStage,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if let InnerLr::Fixed(a) = self.inner_lr {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("inner_lr must be positive, got {a}")));
            }
        }
        Ok(())
    }

    pub fn alpha(&self, lr: f64) -> f64 {
        match self.inner_lr {
            InnerLr::Tied => lr,
            InnerLr::Fixed(a) => a,
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub sgd: SgdState,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(theta: ParamSet, phi: ParamSet, seed: u64) -> Self {
        Self {
            sgd: SgdState::new(&theta),
            adam: AdamState::new(&phi),
            theta,
            phi,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            tables: Default::default(),
            scalars: Default::default(),
        };
        c.tables.insert("theta".into(), self.theta.clone());
        c.tables.insert("phi".into(), self.phi.clone());
        c.tables.insert("sgd.velocity".into(), self.sgd.velocity.clone());
        c.tables.insert("adam.m".into(), self.adam.m.clone());
        c.tables.insert("adam.v".into(), self.adam.v.clone());
        c.scalars.insert("adam.step".into(), self.adam.step as f64);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(Self {
            theta: c.table("theta")?.clone(),
            phi: c.table("phi")?.clone(),
            sgd: SgdState {
                velocity: c.table("sgd.velocity")?.clone(),
            },
            adam: AdamState {
                m: c.table("adam.m")?.clone(),
                v: c.table("adam.v")?.clone(),
                step: c.scalar("adam.step")? as u64,
            },
            epoch: c.epoch,
            rng: c.rng.restore(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// `L_total` at the start of the step.
    pub total: f64,
    /// `None` when `φ` is empty and no meta-update happens.
    pub hypergrad: Option<Hypergrad>,
}

/// Stage 1 of a step: one momentum-SGD step on `L_total`.
pub fn theta_step(state: &mut TrainState, obj: &dyn Objective, cfg: &BilevelConfig, lr: f64) -> Result<f64> {
    let g = Graph::new();
    let tb = state.theta.bind(&g, true);
    let pb = state.phi.bind(&g, false);
    let loss = obj.total(&g, &tb, &pb)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss".into(),
            location: "theta step".into(),
        });
    }
    let d = grads_to_set(&state.theta, grad(&loss, &tb.vars(), false)?)?;
    state.sgd.step(&cfg.sgd, lr, &mut state.theta, &d)?;
    Ok(value)
}

/// Updates `θ` on `L_total`, unrolls the inner problem from the new `θ` on
/// the same batch, and takes one Adam step on `φ` along the hypergradient.
/// The rollout never touches the live `θ`.
pub fn meta_step(state: &mut TrainState, obj: &dyn Objective, cfg: &BilevelConfig, lr: f64) -> Result<StepReport> {
    let total = theta_step(state, obj, cfg, lr)?;
    if state.phi.is_empty() {
        return Ok(StepReport { total, hypergrad: None });
    }
    let stages = cfg.scheme.stages(cfg.inner_steps);
    let traj = inner_rollout(obj, &state.theta, &state.phi, &stages, cfg.alpha(lr))?;
    let h = hypergrad(obj, &traj, &state.phi)?;
    state.adam.step(&cfg.adam, &mut state.phi, &h.grad)?;
    Ok(StepReport {
        total,
        hypergrad: Some(h),
    })
}

/// [`meta_step`] with the two-stage scheme regardless of `cfg.scheme`.
pub fn two_stage_step(state: &mut TrainState, obj: &dyn Objective, cfg: &BilevelConfig, lr: f64) -> Result<StepReport> {
    let cfg = BilevelConfig {
        scheme: Scheme::TwoStage,
        ..cfg.clone()
    };
    meta_step(state, obj, &cfg, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::toy::LinearToy;

    #[test]
    fn counts_and_isolation() {
        for t in 1..=3 {
            let (obj, theta, phi) = LinearToy::random(t as u64, 3, 2, true);
            let cfg = BilevelConfig {
                inner_steps: t,
                ..BilevelConfig::default()
            };
            let mut a = TrainState::new(theta.clone(), phi.clone(), 0);
            let report = meta_step(&mut a, &obj, &cfg, 0.1).unwrap();
            let h = report.hypergrad.unwrap();
            assert_eq!((h.hvp_count, h.mixed_count), (t + 1, t));
            let mut b = TrainState::new(theta, phi.clone(), 0);
            theta_step(&mut b, &obj, &cfg, 0.1).unwrap();
            assert!(a.theta.bitwise_eq(&b.theta));
            assert!(!a.phi.bitwise_eq(&phi));
        }
    }

    #[test]
    fn zero_meta_lr_keeps_phi() {
        let (obj, theta, phi) = LinearToy::random(4, 3, 2, false);
        let cfg = BilevelConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..BilevelConfig::default()
        };
        let mut s = TrainState::new(theta, phi.clone(), 0);
        meta_step(&mut s, &obj, &cfg, 0.1).unwrap();
        assert!(s.phi.bitwise_eq(&phi));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let (obj, theta, phi) = LinearToy::random(9, 3, 2, true);
            let mut s = TrainState::new(theta, phi, 1);
            for _ in 0..3 {
                meta_step(&mut s, &obj, &BilevelConfig::default(), 0.1).unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        assert!(a.theta.bitwise_eq(&b.theta) && a.phi.bitwise_eq(&b.phi));
        assert_eq!(a.to_checkpoint().to_bytes(true), b.to_checkpoint().to_bytes(true));
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let (obj, theta, phi) = LinearToy::random(2, 3, 2, true);
        let mut s = TrainState::new(theta, phi, 5);
        meta_step(&mut s, &obj, &BilevelConfig::default(), 0.1).unwrap();
        let back = TrainState::from_checkpoint(&s.to_checkpoint()).unwrap();
        assert_eq!(back, s);
    }
}
