//! Unrolled inner descent and its reverse-mode hypergradient.

use std::fmt;
use std::str::FromStr;

use l2tww_autodiff::{grad, hvp, hvp_and_mixed, Graph, Tensor, Var};

use crate::bilevel::Objective;
use crate::error::{Error, Result};
use crate::params::{grads_to_set, ParamSet};

/// Which loss an inner step descends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Wfm,
    Org,
    Total,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Wfm => "wfm",
            Stage::Org => "org",
            Stage::Total => "total",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// `T` steps on `L_wfm`, one step on `L_org`, meta-objective `L_org(θ_{T+1})`.
    ThreeStage,
    /// `T` steps on `L_total`, meta-objective `L_org(θ_T)`.
    TwoStage,
}

impl Scheme {
    pub fn stages(self, inner_steps: usize) -> Vec<Stage> {
        match self {
            Scheme::ThreeStage => {
                let mut s = vec![Stage::Wfm; inner_steps];
                s.push(Stage::Org);
                s
            }
            Scheme::TwoStage => vec![Stage::Total; inner_steps],
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three-stage" => Ok(Self::ThreeStage),
            "two-stage" => Ok(Self::TwoStage),
            other => Err(Error::Config(format!("unknown scheme {other:?} (three-stage, two-stage)"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::ThreeStage => "three-stage",
            Scheme::TwoStage => "two-stage",
        })
    }
}

/// Parameter snapshots `θ_0..θ_K` of `K` vanilla descent steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<ParamSet>,
    pub stages: Vec<Stage>,
    pub alpha: f64,
}

impl Trajectory {
    pub fn last(&self) -> &ParamSet {
        self.snapshots.last().expect("trajectory holds θ_0")
    }
}

fn stage_loss(obj: &dyn Objective, stage: Stage, g: &Graph, theta: &crate::params::Bound, phi: &crate::params::Bound) -> Result<Var> {
    match stage {
        Stage::Wfm => obj.wfm(g, theta, phi),
        Stage::Org => obj.org(g, theta),
        Stage::Total => obj.total(g, theta, phi),
    }
}

fn check_loss(loss: &Var, location: impl FnOnce() -> String) -> Result<()> {
    if loss.value().item().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "loss".into(),
            location: location(),
        })
    }
}

/// Runs the given stages from a copy of `theta0` with plain gradient steps of size `alpha`.
pub fn inner_rollout(obj: &dyn Objective, theta0: &ParamSet, phi: &ParamSet, stages: &[Stage], alpha: f64) -> Result<Trajectory> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("inner step size must be positive, got {alpha}")));
    }
    let mut snapshots = Vec::with_capacity(stages.len() + 1);
    snapshots.push(theta0.clone());
    for (t, &stage) in stages.iter().enumerate() {
        let theta = snapshots.last().expect("non-empty");
        let g = Graph::new();
        let tb = theta.bind(&g, true);
        let pb = phi.bind(&g, false);
        let loss = stage_loss(obj, stage, &g, &tb, &pb)?;
        check_loss(&loss, || format!("rollout step {t} ({stage})"))?;
        let d = grads_to_set(theta, grad(&loss, &tb.vars(), false)?)?;
        snapshots.push(theta.axpy(-alpha, &d)?);
    }
    Ok(Trajectory {
        snapshots,
        stages: stages.to_vec(),
        alpha,
    })
}

/// `∇_φ L_org(θ_K)` with the number of second-order products used.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergrad {
    pub grad: ParamSet,
    /// `L_org(θ_K)`.
    pub meta_loss: f64,
    pub hvp_count: usize,
    pub mixed_count: usize,
}

fn axpy_in_place(acc: &mut [Tensor], c: f64, x: &[Tensor]) -> Result<()> {
    for (a, b) in acc.iter_mut().zip(x) {
        *a = a.axpy(c, b)?;
    }
    Ok(())
}

/// Reverse sweep over `traj`: starting from `p = ∇L_org(θ_K)`, every step
/// applies `p ← p − α·H p`, and steps whose loss depends on `φ` also add
/// `−α·(∂²L/∂φ∂θ) p` to the hypergradient.
pub fn hypergrad(obj: &dyn Objective, traj: &Trajectory, phi: &ParamSet) -> Result<Hypergrad> {
    if traj.snapshots.len() != traj.stages.len() + 1 {
        return Err(Error::Spec(format!(
            "trajectory has {} snapshots for {} steps",
            traj.snapshots.len(),
            traj.stages.len()
        )));
    }
    let last = traj.last();
    let g = Graph::new();
    let tb = last.bind(&g, true);
    let meta = obj.org(&g, &tb)?;
    check_loss(&meta, || "meta-objective".into())?;
    let mut p: Vec<Tensor> = grad(&meta, &tb.vars(), false)?
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect();
    let mut dphi: Vec<Tensor> = phi.tensors().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut hvp_count, mut mixed_count) = (0, 0);
    for t in (0..traj.stages.len()).rev() {
        let stage = traj.stages[t];
        let theta = &traj.snapshots[t];
        let g = Graph::new();
        let tb = theta.bind(&g, true);
        let h = if stage == Stage::Org {
            let loss = obj.org(&g, &tb)?;
            hvp_count += 1;
            hvp(&loss, &tb.vars(), &p)?
        } else {
            let pb = phi.bind(&g, true);
            let loss = stage_loss(obj, stage, &g, &tb, &pb)?;
            let (h, m) = hvp_and_mixed(&loss, &tb.vars(), &pb.vars(), &p)?;
            hvp_count += 1;
            mixed_count += 1;
            axpy_in_place(&mut dphi, -traj.alpha, &m)?;
            h
        };
        axpy_in_place(&mut p, -traj.alpha, &h)?;
    }
    let grad = phi.with_values(dphi)?;
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            what: "hypergradient".into(),
            location: "reverse sweep".into(),
        });
    }
    Ok(Hypergrad {
        grad,
        meta_loss: meta.value().item(),
        hvp_count,
        mixed_count,
    })
}

/// `φ ↦ L_org(θ_K(φ))` by a fresh forward rollout (the finite-difference oracle's function).
pub fn meta_objective(obj: &dyn Objective, theta0: &ParamSet, phi: &ParamSet, stages: &[Stage], alpha: f64) -> Result<f64> {
    let traj = inner_rollout(obj, theta0, phi, stages, alpha)?;
    let g = Graph::new();
    let tb = traj.last().bind(&g, false);
    Ok(obj.org(&g, &tb)?.value().item())
}

/// Central differences of [`meta_objective`] in every coordinate of `φ`.
pub fn fd_hypergrad(obj: &dyn Objective, theta0: &ParamSet, phi: &ParamSet, stages: &[Stage], alpha: f64, eps: f64) -> Result<ParamSet> {
    let mut out = phi.zeros_like();
    let names: Vec<String> = phi.names().cloned().collect();
    for name in &names {
        let len = phi.get(name)?.len();
        for i in 0..len {
            let mut plus = phi.clone();
            plus.get_mut(name)?.data_mut()[i] += eps;
            let mut minus = phi.clone();
            minus.get_mut(name)?.data_mut()[i] -= eps;
            let d = (meta_objective(obj, theta0, &plus, stages, alpha)? - meta_objective(obj, theta0, &minus, stages, alpha)?)
                / (2.0 * eps);
            out.get_mut(name)?.data_mut()[i] = d;
        }
    }
    Ok(out)
}
