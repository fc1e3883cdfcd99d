//! Seeded oracle suites: gradients, Hessian-vector products, hypergradients.

use std::fmt;
use std::str::FromStr;

use l2tww_autodiff::check::{gradcheck_suite, hvpcheck_suite, rel_err, CaseReport};

use crate::bilevel::toy::LinearToy;
use crate::bilevel::{fd_hypergrad, hypergrad, inner_rollout, Scheme};
use crate::error::{Error, Result};

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-6;
pub const HVP_EPS: f64 = 1e-5;
pub const HVP_TOL: f64 = 1e-5;
pub const SYMMETRY_TOL: f64 = 1e-10;
pub const HYPER_EPS: f64 = 1e-5;
pub const HYPER_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Hvpcheck,
    Hypergradcheck,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Self::Gradcheck),
            "hvpcheck" => Ok(Self::Hvpcheck),
            "hypergradcheck" => Ok(Self::Hypergradcheck),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?} (gradcheck, hvpcheck, hypergradcheck, all)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gradcheck => "gradcheck",
            Self::Hvpcheck => "hvpcheck",
            Self::Hypergradcheck => "hypergradcheck",
            Self::All => "all",
        })
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::ThreeStage => "hypergrad_three_stage",
        Scheme::TwoStage => "hypergrad_two_stage",
    }
}

/// Reverse-mode hypergradients of the 12-parameter linear toy (6 inner, 6
/// outer) against full-rollout central differences, for `T ∈ {1,2,3}` and
/// both schemes, plus the product-count contract (`T+1` Hessian-vector and
/// `T` mixed products for the three-stage scheme, `T` and `T` otherwise).
pub fn hypergradcheck_suite(seeds: u64, eps: f64, tolerance: f64) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for t in 1..=3usize {
        for scheme in [Scheme::ThreeStage, Scheme::TwoStage] {
            for seed in 0..seeds {
                let (obj, theta, phi) = LinearToy::random(seed, 2, 3, false);
                let stages = scheme.stages(t);
                let alpha = 0.3;
                let traj = inner_rollout(&obj, &theta, &phi, &stages, alpha)?;
                let h = hypergrad(&obj, &traj, &phi)?;
                let fd = fd_hypergrad(&obj, &theta, &phi, &stages, alpha, eps)?;
                out.push(CaseReport {
                    suite: "hypergradcheck",
                    op: scheme_name(scheme),
                    seed: seed * 10 + t as u64,
                    error: rel_err(&h.grad.flat(), &fd.flat()),
                    tolerance,
                });
                let expected = match scheme {
                    Scheme::ThreeStage => (t + 1, t),
                    Scheme::TwoStage => (t, t),
                };
                out.push(CaseReport {
                    suite: "hypergradcheck",
                    op: "product_counts",
                    seed: seed * 10 + t as u64,
                    error: if (h.hvp_count, h.mixed_count) == expected { 0.0 } else { f64::INFINITY },
                    tolerance,
                });
            }
        }
    }
    Ok(out)
}

/// Runs `suite` at the fixed tolerances with `seeds` seeds per case.
pub fn run(suite: Suite, seeds: u64) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        out.extend(gradcheck_suite(seeds, GRAD_EPS, GRAD_TOL)?);
    }
    if matches!(suite, Suite::Hvpcheck | Suite::All) {
        out.extend(hvpcheck_suite(seeds, HVP_EPS, HVP_TOL, SYMMETRY_TOL)?);
    }
    if matches!(suite, Suite::Hypergradcheck | Suite::All) {
        out.extend(hypergradcheck_suite(seeds.min(20), HYPER_EPS, HYPER_TOL)?);
    }
    Ok(out)
}

/// Worst case per `(suite, op)`, in first-seen order.
pub fn summarize(reports: &[CaseReport]) -> Vec<&CaseReport> {
    let mut worst: Vec<&CaseReport> = Vec::new();
    for r in reports {
        match worst.iter_mut().find(|w| w.suite == r.suite && w.op == r.op) {
            Some(w) => {
                if w.passed() && (!r.passed() || r.error > w.error) {
                    *w = r;
                }
            }
            None => worst.push(r),
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hypergrad_suite_passes_on_few_seeds() {
        let r = hypergradcheck_suite(2, HYPER_EPS, HYPER_TOL).unwrap();
        assert_eq!(r.len(), 3 * 2 * 2 * 2);
        assert!(r.iter().all(CaseReport::passed), "{r:?}");
    }

    #[test]
    fn summary_keeps_first_failure() {
        let mk = |op, seed, error| CaseReport {
            suite: "s",
            op,
            seed,
            error,
            tolerance: 1.0,
        };
        let r = vec![mk("a", 0, 0.1), mk("a", 1, 2.0), mk("a", 2, 3.0), mk("b", 0, 0.5)];
        let s = summarize(&r);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].seed, s[1].op), (1, "b"));
    }
}
