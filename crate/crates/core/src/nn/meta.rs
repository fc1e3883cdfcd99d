//! Meta-networks producing channel weights `w` and pair weights `λ`, and the
//! pointwise adaptors that map target features onto source channels.
//!
//! Per pair `key` the meta-parameters are
//! - `f.{key}.w` `[C,C]`, `f.{key}.b` `[C]`: `w = softmax(gap(S)·W + b)`
//! - `g.{key}.w` `[C,1]`, `g.{key}.b` `[1]`: `λ = relu6(gap(S)·a + c)`
//! - or, for free meta-weights, `mw.{key}.logits` `[C]` and `mw.{key}.lambda` `[1]`.
//!
//! Adaptors `adapt.{key}.w` `[C_s, C_t, 1, 1]` belong to the target side.

use std::fmt;
use std::str::FromStr;

use l2tww_autodiff::{ConvGeom, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::transfer::Pair;

/// Where a weight comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    /// Constant: `1/C` for channel weights, `fixed_lambda` for pair weights.
    Uniform,
    /// Free parameters, independent of the input.
    MetaWeights,
    /// One-layer networks of the pooled source features.
    MetaNetworks,
}

impl FromStr for WeightSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "meta-weights" => Ok(Self::MetaWeights),
            "meta-networks" => Ok(Self::MetaNetworks),
            other => Err(Error::Config(format!(
                "unknown weight source {other:?} (uniform, meta-weights, meta-networks)"
            ))),
        }
    }
}

impl fmt::Display for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::MetaWeights => "meta-weights",
            Self::MetaNetworks => "meta-networks",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub channel: WeightSource,
    pub pair: WeightSource,
    /// `λ` when `pair` is [`WeightSource::Uniform`].
    pub fixed_lambda: f64,
    /// Initial pre-activation of learned `λ` (bias of `g`, or the free scalar).
    pub lambda_init: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            channel: WeightSource::MetaNetworks,
            pair: WeightSource::MetaNetworks,
            fixed_lambda: 1.0,
            lambda_init: 1.0,
        }
    }
}

impl MetaConfig {
    /// Constant uniform weights: plain feature matching.
    pub fn uniform(lambda: f64) -> Self {
        Self {
            channel: WeightSource::Uniform,
            pair: WeightSource::Uniform,
            fixed_lambda: lambda,
            lambda_init: lambda,
        }
    }
}

/// Zero-initialized meta-parameters for `pairs`; `channels[i]` is the source
/// channel count of `pairs[i]`.
pub fn init_meta(cfg: &MetaConfig, pairs: &[Pair], channels: &[usize]) -> ParamSet {
    let mut phi = ParamSet::new();
    for (p, &c) in pairs.iter().zip(channels) {
        let key = p.key();
        match cfg.channel {
            WeightSource::MetaNetworks => {
                phi.insert(format!("f.{key}.w"), Tensor::zeros(&[c, c]));
                phi.insert(format!("f.{key}.b"), Tensor::zeros(&[c]));
            }
            WeightSource::MetaWeights => phi.insert(format!("mw.{key}.logits"), Tensor::zeros(&[c])),
            WeightSource::Uniform => {}
        }
        match cfg.pair {
            WeightSource::MetaNetworks => {
                phi.insert(format!("g.{key}.w"), Tensor::zeros(&[c, 1]));
                phi.insert(format!("g.{key}.b"), Tensor::full(&[1], cfg.lambda_init));
            }
            WeightSource::MetaWeights => {
                phi.insert(format!("mw.{key}.lambda"), Tensor::full(&[1], cfg.lambda_init))
            }
            WeightSource::Uniform => {}
        }
    }
    phi
}

/// `[B,C]` channel weights for one pair given the pooled source tap `[B,C]`.
pub fn meta_f(cfg: &MetaConfig, phi: &Bound, pair: &Pair, pooled: &Var) -> Result<Var> {
    let s = pooled.shape();
    let key = pair.key();
    match cfg.channel {
        WeightSource::MetaNetworks => Ok(pooled
            .matmul(phi.get(&format!("f.{key}.w"))?)?
            .add_row(phi.get(&format!("f.{key}.b"))?)?
            .softmax()?),
        WeightSource::MetaWeights => Ok(phi
            .get(&format!("mw.{key}.logits"))?
            .reshape(&[1, s[1]])?
            .broadcast_to(&s)?
            .softmax()?),
        WeightSource::Uniform => Ok(pooled.graph().constant(Tensor::full(&s, 1.0 / s[1] as f64))),
    }
}

/// `[B]` pair weights for one pair given the pooled source tap `[B,C]`.
pub fn meta_g(cfg: &MetaConfig, phi: &Bound, pair: &Pair, pooled: &Var) -> Result<Var> {
    let b = pooled.shape()[0];
    let key = pair.key();
    match cfg.pair {
        WeightSource::MetaNetworks => Ok(pooled
            .matmul(phi.get(&format!("g.{key}.w"))?)?
            .add_row(phi.get(&format!("g.{key}.b"))?)?
            .relu6()
            .reshape(&[b])?),
        WeightSource::MetaWeights => Ok(phi
            .get(&format!("mw.{key}.lambda"))?
            .relu6()
            .broadcast_to(&[b])?),
        WeightSource::Uniform => Ok(pooled.graph().constant(Tensor::full(&[b], cfg.fixed_lambda))),
    }
}

pub fn adaptor_name(pair: &Pair) -> String {
    format!("adapt.{}.w", pair.key())
}

/// Starting point of the adaptor kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum AdaptorInit {
    /// All zeros: the matching terms start out as plain source-feature norms
    /// and the target's early gradients come from the task loss alone.
    #[default]
    Zero,
    /// Normal with std `1/sqrt(C_t)`.
    Normal { seed: u64 },
}

/// `shapes[i]` is `(C_s, C_t)` for `pairs[i]`.
pub fn init_adaptors(pairs: &[Pair], shapes: &[(usize, usize)], init: AdaptorInit) -> ParamSet {
    let mut out = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(match init {
        AdaptorInit::Normal { seed } => seed,
        AdaptorInit::Zero => 0,
    });
    for (p, &(cs, ct)) in pairs.iter().zip(shapes) {
        let t = match init {
            AdaptorInit::Zero => Tensor::zeros(&[cs, ct, 1, 1]),
            AdaptorInit::Normal { .. } => {
                let normal = Normal::new(0.0, (1.0 / ct as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&[cs, ct, 1, 1], |_| normal.sample(&mut rng))
            }
        };
        out.insert(adaptor_name(p), t);
    }
    out
}

/// Pointwise convolution onto the source channels, then bilinear resize to the
/// source tap's `H×W`.
pub fn adaptor_apply(theta: &Bound, pair: &Pair, target_tap: &Var, hw: [usize; 2]) -> Result<Var> {
    let k = theta.get(&adaptor_name(pair))?;
    let (ks, ts) = (k.shape(), target_tap.shape());
    if ts.len() != 4 || ks[1] != ts[1] {
        return Err(Error::Spec(format!(
            "adaptor {} expects {} target channels, tap has shape {:?}",
            pair.key(),
            ks[1],
            ts
        )));
    }
    Ok(target_tap
        .conv2d(k, ConvGeom { stride: 1, padding: 0 })?
        .bilinear_resize(hw[0], hw[1])?)
}

/// Evaluates `w` and `λ` on constant pooled features (for inspection).
pub fn evaluate_weights(cfg: &MetaConfig, phi: &ParamSet, pair: &Pair, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let bound = phi.bind(&g, false);
    let x = g.constant(pooled.clone());
    let w = meta_f(cfg, &bound, pair, &x)?;
    let l = meta_g(cfg, &bound, pair, &x)?;
    Ok(((*w.value()).clone(), (*l.value()).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: Pair = Pair { source: 0, m: 1, n: 2 };

    fn pooled(b: usize, c: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[b, c], |i| (((i as u64 + 1) * (seed * 7 + 13)) % 23) as f64 / 5.0 - 2.0)
    }

    #[test]
    fn zero_init_gives_uniform_w_and_lambda_one() {
        let cfg = MetaConfig::default();
        let phi = init_meta(&cfg, &[P], &[4]);
        let (w, l) = evaluate_weights(&cfg, &phi, &P, &pooled(3, 4, 1)).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.25));
        assert_eq!(l.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn nondegenerate_meta_network_is_samplewise() {
        let cfg = MetaConfig::default();
        let mut phi = init_meta(&cfg, &[P], &[3]);
        *phi.get_mut("f.s0_m1_n2.w").unwrap() = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.3 - 1.0);
        let x = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (w, _) = evaluate_weights(&cfg, &phi, &P, &x).unwrap();
        assert_ne!(w.data()[..3], w.data()[3..]);
    }

    #[test]
    fn lambda_clamps() {
        let cfg = MetaConfig {
            lambda_init: -2.0,
            ..MetaConfig::default()
        };
        let phi = init_meta(&cfg, &[P], &[2]);
        let (_, l) = evaluate_weights(&cfg, &phi, &P, &pooled(2, 2, 0)).unwrap();
        assert_eq!(l.data(), &[0.0, 0.0]);
    }

    #[test]
    fn unknown_pair_is_an_error() {
        let cfg = MetaConfig::default();
        let phi = init_meta(&cfg, &[P], &[2]);
        let other = Pair::new(0, 3, 3);
        let err = evaluate_weights(&cfg, &phi, &other, &pooled(1, 2, 0)).unwrap_err();
        assert!(matches!(err, Error::MissingParam(_)));
    }

    #[test]
    fn meta_weights_mode_ignores_input() {
        let cfg = MetaConfig {
            channel: WeightSource::MetaWeights,
            pair: WeightSource::MetaWeights,
            ..MetaConfig::default()
        };
        let mut phi = init_meta(&cfg, &[P], &[3]);
        assert!(phi.names().all(|n| n.starts_with("mw.")));
        *phi.get_mut("mw.s0_m1_n2.logits").unwrap() = Tensor::new(&[3], vec![0.0, 3f64.ln(), 0.0]).unwrap();
        let (w, l) = evaluate_weights(&cfg, &phi, &P, &pooled(2, 3, 4)).unwrap();
        assert_eq!(w.shape(), &[2, 3]);
        for row in w.data().chunks(3) {
            assert!((row[1] - 0.6).abs() < 1e-15);
        }
        assert_eq!(l.data(), &[1.0, 1.0]);
    }

    #[test]
    fn uniform_source_has_no_parameters() {
        let cfg = MetaConfig::uniform(0.5);
        assert!(init_meta(&cfg, &[P], &[4]).is_empty());
        let (w, l) = evaluate_weights(&cfg, &ParamSet::new(), &P, &pooled(2, 4, 0)).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.25));
        assert_eq!(l.data(), &[0.5, 0.5]);
    }

    fn bind_adaptor(k: Tensor) -> (Graph, Bound) {
        let mut theta = ParamSet::new();
        theta.insert(adaptor_name(&P), k);
        let g = Graph::new();
        let b = theta.bind(&g, true);
        (g, b)
    }

    #[test]
    fn identity_adaptor_at_equal_size_is_identity() {
        let eye = Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap();
        let (g, theta) = bind_adaptor(eye);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f64 * 0.01);
        let y = adaptor_apply(&theta, &P, &g.constant(x.clone()), [4, 4]).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn zero_adaptor_and_output_shape() {
        let (g, theta) = bind_adaptor(Tensor::zeros(&[5, 2, 1, 1]));
        let x = g.constant(Tensor::ones(&[1, 2, 8, 8]));
        let y = adaptor_apply(&theta, &P, &x, [4, 4]).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 4, 4]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let wrong = g.constant(Tensor::ones(&[1, 3, 8, 8]));
        assert!(adaptor_apply(&theta, &P, &wrong, [4, 4]).is_err());
    }

    proptest! {
        #[test]
        fn weights_stay_on_simplex_and_in_range(
            ws in prop::collection::vec(-20.0f64..20.0, 16),
            a in prop::collection::vec(-20.0f64..20.0, 4),
            c in -10.0f64..10.0,
            seed in 0u64..500,
        ) {
            let cfg = MetaConfig::default();
            let mut phi = init_meta(&cfg, &[P], &[4]);
            *phi.get_mut("f.s0_m1_n2.w").unwrap() = Tensor::new(&[4, 4], ws).unwrap();
            *phi.get_mut("g.s0_m1_n2.w").unwrap() = Tensor::new(&[4, 1], a).unwrap();
            *phi.get_mut("g.s0_m1_n2.b").unwrap() = Tensor::new(&[1], vec![c]).unwrap();
            let (w, l) = evaluate_weights(&cfg, &phi, &P, &pooled(5, 4, seed)).unwrap();
            for row in w.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            prop_assert!(l.data().iter().all(|&v| (0.0..=6.0).contains(&v)));
        }
    }
}
