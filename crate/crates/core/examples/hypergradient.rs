//! Reverse-mode hypergradients of a small bilevel problem, for both bilevel
//! schemes, against full-rollout finite differences.
//!
//!     cargo run --release -p l2tww --example hypergradient

use l2tww::bilevel::toy::LinearToy;
use l2tww::bilevel::{fd_hypergrad, hypergrad, inner_rollout, Scheme};
use l2tww_autodiff::check::rel_err;

fn main() -> l2tww::Result<()> {
    let (obj, theta, phi) = LinearToy::random(7, 3, 4, true);
    println!("{} inner and {} outer parameters", theta.numel(), phi.numel());
    for scheme in [Scheme::ThreeStage, Scheme::TwoStage] {
        for steps in 1..=3 {
            let stages = scheme.stages(steps);
            let traj = inner_rollout(&obj, &theta, &phi, &stages, 0.2)?;
            let h = hypergrad(&obj, &traj, &phi)?;
            let fd = fd_hypergrad(&obj, &theta, &phi, &stages, 0.2, 1e-5)?;
            println!(
                "{:<11} T={steps}  meta loss {:.5}  rel err {:.1e}  {} Hessian and {} mixed products",
                scheme.to_string(),
                h.meta_loss,
                rel_err(&h.grad.flat(), &fd.flat()),
                h.hvp_count,
                h.mixed_count
            );
        }
    }
    Ok(())
}
