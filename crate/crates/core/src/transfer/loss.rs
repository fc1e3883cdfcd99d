//! Weighted feature matching and the combined training objective.

use l2tww_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::meta::{self, AdaptorInit, MetaConfig};
use crate::nn::FeatureExtractor;
use crate::params::{Bound, ParamSet};
use crate::transfer::{MatchConfig, Pair};

/// Per-sample weighted matching loss `[B]`:
/// `(1/HW) Σ_c w_c Σ_ij (adapted − source)²` with `H×W` taken from `source`.
pub fn wfm_pair_loss(adapted: &Var, source: &Var, w: &Var) -> Result<Var> {
    let s = source.shape();
    if s.len() != 4 || adapted.shape() != s || w.shape() != s[..2] {
        return Err(Error::Spec(format!(
            "matching shapes: adapted {:?}, source {:?}, weights {:?}",
            adapted.shape(),
            s,
            w.shape()
        )));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let per_channel = adapted
        .sub(source)?
        .square()?
        .reshape(&[b, c, hw])?
        .sum_to(&[b, c, 1])?
        .reshape(&[b, c])?
        .scale(1.0 / hw as f64);
    Ok(per_channel.mul(w)?.sum_to(&[b, 1])?.reshape(&[b])?)
}

/// Batch mean of `Σ_pairs λ·loss` from per-sample `[B]` terms.
pub fn combined_wfm(graph: &Graph, terms: &[PairTerm]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms {
        let v = t.lambda.mul(&t.loss)?;
        acc = Some(match acc {
            Some(a) => a.add(&v)?,
            None => v,
        });
    }
    match acc {
        Some(a) => a.mean().map_err(Into::into),
        None => Ok(graph.constant(Tensor::scalar(0.0))),
    }
}

/// `L_org + β·L_wfm`.
pub fn total_loss(org: &Var, wfm: &Var, beta: f64) -> Result<Var> {
    Ok(org.add(&wfm.scale(beta))?)
}

/// Per-sample `λ` and matching loss of one pair, both `[B]`.
#[derive(Clone, Debug)]
pub struct PairTerm {
    pub pair: Pair,
    pub lambda: Var,
    pub loss: Var,
}

pub struct Forward {
    pub logits: Var,
    pub terms: Vec<PairTerm>,
    pub wfm: Var,
}

/// A target network, frozen sources, candidate pairs and weight sources.
#[derive(Clone, Debug)]
pub struct TransferModel {
    pub target: FeatureExtractor,
    pub sources: Vec<FeatureExtractor>,
    pub matching: MatchConfig,
    pub meta: MetaConfig,
}

impl TransferModel {
    pub fn new(
        target: FeatureExtractor,
        sources: Vec<FeatureExtractor>,
        matching: MatchConfig,
        meta: MetaConfig,
    ) -> Result<Self> {
        matching.validate()?;
        let t_taps = target.spec.groups.len();
        for p in &matching.pairs {
            let src = sources.get(p.source).ok_or_else(|| Error::UnknownPair(p.key()))?;
            if p.m == 0 || p.m > src.spec.groups.len() || p.n == 0 || p.n > t_taps {
                return Err(Error::UnknownPair(p.key()));
            }
            if src.spec.input != target.spec.input {
                return Err(Error::Spec(format!(
                    "source {} input {:?} differs from target input {:?}",
                    p.source, src.spec.input, target.spec.input
                )));
            }
        }
        Ok(Self {
            target,
            sources: sources.into_iter().map(FeatureExtractor::frozen).collect(),
            matching,
            meta,
        })
    }

    /// The target without any transfer.
    pub fn scratch(target: FeatureExtractor) -> Self {
        Self {
            target,
            sources: Vec::new(),
            matching: MatchConfig {
                pairs: Vec::new(),
                style: crate::transfer::MatchStyle::Single,
                beta: 0.0,
            },
            meta: MetaConfig::uniform(0.0),
        }
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.matching.pairs
    }

    pub fn beta(&self) -> f64 {
        self.matching.beta
    }

    fn source_shape(&self, p: &Pair) -> [usize; 3] {
        self.sources[p.source].spec.tap_shapes()[p.m - 1]
    }

    fn target_shape(&self, p: &Pair) -> [usize; 3] {
        self.target.spec.tap_shapes()[p.n - 1]
    }

    /// Initial `θ` (target network and adaptors) and `φ`.
    pub fn initial_params(&self, adaptors: AdaptorInit) -> (ParamSet, ParamSet) {
        let pairs = self.pairs();
        let shapes: Vec<_> = pairs
            .iter()
            .map(|p| (self.source_shape(p)[0], self.target_shape(p)[0]))
            .collect();
        let mut theta = self.target.params.clone();
        theta.extend(meta::init_adaptors(pairs, &shapes, adaptors));
        let channels: Vec<_> = shapes.iter().map(|s| s.0).collect();
        (theta, meta::init_meta(&self.meta, pairs, &channels))
    }

    /// Tap tensors of every source for a batch, indexed `[source][tap]`.
    pub fn source_features(&self, x: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        self.sources
            .iter()
            .map(|s| Ok(s.forward_features(x)?.0))
            .collect()
    }

    /// Target forward pass plus all pair terms. `src` holds the source taps
    /// as variables of the same graph, indexed `[source][tap]`.
    pub fn forward(&self, graph: &Graph, theta: &Bound, phi: &Bound, x: &Var, src: &[Vec<Var>]) -> Result<Forward> {
        let feats = self.target.forward(theta, x)?;
        let mut terms = Vec::with_capacity(self.pairs().len());
        for p in self.pairs() {
            let s = src
                .get(p.source)
                .and_then(|taps| taps.get(p.m - 1))
                .ok_or_else(|| Error::UnknownPair(p.key()))?;
            let shape = s.shape();
            let pooled = s.global_avg_pool()?;
            let w = meta::meta_f(&self.meta, phi, p, &pooled)?;
            let lambda = meta::meta_g(&self.meta, phi, p, &pooled)?;
            let adapted = meta::adaptor_apply(theta, p, &feats.taps[p.n - 1], [shape[2], shape[3]])?;
            let loss = wfm_pair_loss(&adapted, s, &w)?;
            terms.push(PairTerm { pair: *p, lambda, loss });
        }
        let wfm = combined_wfm(graph, &terms)?;
        Ok(Forward {
            logits: feats.logits,
            terms,
            wfm,
        })
    }

    /// Binds cached source taps as constants.
    pub fn bind_sources(graph: &Graph, src: &[Vec<Tensor>]) -> Vec<Vec<Var>> {
        src.iter()
            .map(|taps| taps.iter().map(|t| graph.constant(t.clone())).collect())
            .collect()
    }

    /// Losses and per-pair statistics of a batch at `(θ, φ)`, without gradients.
    pub fn report(
        &self,
        theta: &ParamSet,
        phi: &ParamSet,
        x: &Tensor,
        y: &[usize],
        src: &[Vec<Tensor>],
    ) -> Result<TransferBatchReport> {
        let g = Graph::new();
        let (tb, pb) = (theta.bind(&g, false), phi.bind(&g, false));
        let sv = Self::bind_sources(&g, src);
        let fwd = self.forward(&g, &tb, &pb, &g.constant(x.clone()), &sv)?;
        let org = fwd.logits.cross_entropy(y)?;
        let total = total_loss(&org, &fwd.wfm, self.beta())?;
        Ok(TransferBatchReport::new(&fwd.terms, &org, &fwd.wfm, &total))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairStats {
    pub pair: Pair,
    pub lambda_mean: f64,
    pub lambda_std: f64,
    /// Batch mean of the unweighted-by-`λ` pair loss.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferBatchReport {
    pub pairs: Vec<PairStats>,
    pub wfm: f64,
    pub org: f64,
    pub total: f64,
}

fn mean_std(t: &Tensor) -> (f64, f64) {
    let n = t.len().max(1) as f64;
    let mean = t.sum() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl TransferBatchReport {
    pub fn new(terms: &[PairTerm], org: &Var, wfm: &Var, total: &Var) -> Self {
        let pairs = terms
            .iter()
            .map(|t| {
                let (lambda_mean, lambda_std) = mean_std(&t.lambda.value());
                PairStats {
                    pair: t.pair,
                    lambda_mean,
                    lambda_std,
                    loss: mean_std(&t.loss.value()).0,
                }
            })
            .collect();
        Self {
            pairs,
            wfm: wfm.value().item(),
            org: org.value().item(),
            total: total.value().item(),
        }
    }
}
