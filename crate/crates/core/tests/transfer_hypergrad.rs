use l2tww::bilevel::{fd_hypergrad, hypergrad, inner_rollout, Scheme, TransferProblem};
use l2tww::nn::{AdaptorInit, ExtractorSpec, FeatureExtractor, MetaConfig, WeightSource};
use l2tww::params::ParamSet;
use l2tww::transfer::{make_config, MatchStyle, TransferModel};
use l2tww::verify::{HYPER_EPS, HYPER_TOL};
use l2tww_autodiff::check::rel_err;
use l2tww_autodiff::Tensor;

fn model(source: WeightSource) -> TransferModel {
    let spec_t = ExtractorSpec::uniform([2, 4, 4], &[2], 1, 2);
    let spec_s = ExtractorSpec::uniform([2, 4, 4], &[2], 1, 2);
    let target = FeatureExtractor::build(spec_t.clone(), "t.", 1).unwrap();
    let src = FeatureExtractor::build(spec_s.clone(), "s0.", 2).unwrap().frozen();
    let m = make_config(MatchStyle::AllToAll, 0, &spec_s.tap_shapes(), &spec_t.tap_shapes(), 0.5).unwrap();
    let meta = MetaConfig {
        channel: source,
        pair: source,
        ..MetaConfig::default()
    };
    TransferModel::new(target, vec![src], m, meta).unwrap()
}

fn jitter(p: &ParamSet, scale: f64, salt: usize) -> ParamSet {
    let mut out = p.clone();
    for (k, (_, t)) in out.iter_mut().enumerate() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += scale * (((i + 3 * k + salt) as f64) * 1.618).sin();
        }
    }
    out
}

fn check(source: WeightSource, scheme: Scheme, steps: usize) {
    let model = model(source);
    let (theta, phi) = model.initial_params(AdaptorInit::Normal { seed: 5 });
    let phi = jitter(&phi, 0.3, steps);
    let x = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 7) % 13) as f64 / 6.0 - 1.0);
    let y = vec![0, 1, 1];
    let src = model.source_features(&x).unwrap();
    let obj = TransferProblem::new(&model, &x, &y, &src);
    let stages = scheme.stages(steps);
    let traj = inner_rollout(&obj, &theta, &phi, &stages, 0.1).unwrap();
    let h = hypergrad(&obj, &traj, &phi).unwrap();
    let fd = fd_hypergrad(&obj, &theta, &phi, &stages, 0.1, HYPER_EPS).unwrap();
    let err = rel_err(&h.grad.flat(), &fd.flat());
    assert!(
        err < HYPER_TOL,
        "{source} {scheme} T={steps}: rel err {err:.3e} over {} meta-params",
        phi.numel()
    );
    assert!(h.grad.flat().iter().any(|v| v.abs() > 1e-8));
}

#[test]
fn meta_networks_three_stage() {
    for t in 1..=2 {
        check(WeightSource::MetaNetworks, Scheme::ThreeStage, t);
    }
}

#[test]
fn meta_networks_two_stage() {
    for t in 1..=2 {
        check(WeightSource::MetaNetworks, Scheme::TwoStage, t);
    }
}

#[test]
fn meta_weights_both_schemes() {
    for scheme in [Scheme::ThreeStage, Scheme::TwoStage] {
        check(WeightSource::MetaWeights, scheme, 2);
    }
}

#[test]
fn meta_network_param_count_is_small() {
    let m = model(WeightSource::MetaNetworks);
    let (_, phi) = m.initial_params(AdaptorInit::Zero);
    assert_eq!(phi.numel(), 2 * 2 + 2 + 2 + 1);
}
