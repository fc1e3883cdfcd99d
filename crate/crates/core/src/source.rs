//! Source networks: supervised pretraining, the planted-layer edit, and
//! linear probes of tap features.

use std::ops::Range;
use std::path::Path;
use std::rc::Rc;

use l2tww_autodiff::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bilevel::{theta_step, train, BilevelConfig, EpochMetrics, Objective, TrainConfig, TrainState};
use crate::data::{batches, Checkpoint, Dataset, RngState};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, AdamConfig, AdamState, ExtractorSpec, FeatureExtractor};
use crate::params::{grads_to_set, Bound, ParamSet};
use crate::transfer::TransferModel;

const CHUNK: usize = 256;

/// Writes `net` as a checkpoint: parameters in table `source` with the
/// network prefix stripped, the spec as `spec.*` scalars.
pub fn save_source(net: &FeatureExtractor, epoch: u64, path: &Path, f64: bool) -> Result<()> {
    let mut c = Checkpoint {
        epoch,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
        tables: Default::default(),
        scalars: net.spec.to_scalars("spec.").into_iter().collect(),
    };
    let mut table = ParamSet::new();
    for (name, t) in net.params.iter() {
        table.insert(name.strip_prefix(net.prefix.as_str()).unwrap_or(name), t.clone());
    }
    c.tables.insert("source".into(), table);
    c.save(path, f64)
}

/// Reads a network written by [`save_source`], frozen.
pub fn load_source(path: &Path, prefix: &str) -> Result<FeatureExtractor> {
    let c = Checkpoint::load(path)?;
    let spec = ExtractorSpec::from_scalars("spec.", |k| c.scalar(k))?;
    let mut net = FeatureExtractor::build(spec, prefix, 0)?;
    let stored = c.table("source")?;
    for (name, t) in net.params.iter_mut() {
        let s = stored.get(name.strip_prefix(prefix).unwrap_or(name))?;
        if s.shape() != t.shape() {
            return Err(Error::Spec(format!(
                "{}: {name} has shape {:?}, spec expects {:?}",
                path.display(),
                s.shape(),
                t.shape()
            )));
        }
        *t = s.clone();
    }
    if stored.len() != net.params.len() {
        return Err(Error::Spec(format!(
            "{}: {} stored parameters, spec has {}",
            path.display(),
            stored.len(),
            net.params.len()
        )));
    }
    Ok(net.frozen())
}

/// Supervised training of `net` on `data`; returns per-epoch metrics where
/// `test_acc` is accuracy on `data` itself.
pub fn pretrain(
    net: &mut FeatureExtractor,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let model = TransferModel::scratch(net.clone());
    let mut state = TrainState::new(net.params.clone(), ParamSet::new(), seed);
    let history = train(&model, data, data, cfg, &mut state, on_epoch)?;
    net.params = state.theta;
    Ok(history)
}

/// A linear head on the global-average-pooled channels `channels` of the
/// planted tap, trained against `labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantHead {
    pub channels: Range<usize>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Images the head is trained on; all when `None`. On the others the
    /// pooled channels are pushed towards zero with weight `silence`.
    pub active: Option<Vec<bool>>,
    pub silence: f64,
}

impl PlantHead {
    pub fn new(channels: Range<usize>, labels: Vec<usize>, classes: usize) -> Self {
        Self {
            channels,
            labels,
            classes,
            active: None,
            silence: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantConfig {
    /// 1-based tap index.
    pub layer: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Channels of the planted tap read by the randomized groups; all when
    /// `None`. These channels are fixed local colour averages rather than
    /// trained features.
    pub feed: Option<Range<usize>>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            layer: 1,
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            seed: 0,
            feed: None,
        }
    }
}

fn selector(c: usize, range: &Range<usize>) -> Tensor {
    let k = range.len();
    Tensor::from_fn(&[c, k], |i| {
        let (row, col) = (i / k, i % k);
        if row == range.start + col {
            1.0
        } else {
            0.0
        }
    })
}

struct PlantProblem<'a> {
    net: &'a FeatureExtractor,
    layer: usize,
    heads: &'a [PlantHead],
    x: Tensor,
    idx: &'a [usize],
}

impl Objective for PlantProblem<'_> {
    fn org(&self, g: &Graph, theta: &Bound) -> Result<Var> {
        let taps = self.net.forward_taps(theta, &g.constant(self.x.clone()), self.layer)?;
        let pooled = taps[self.layer - 1].global_avg_pool()?;
        let c = pooled.shape()[1];
        let mut loss: Option<Var> = None;
        for (h, head) in self.heads.iter().enumerate() {
            let active: Vec<bool> = self
                .idx
                .iter()
                .map(|&i| head.active.as_ref().map_or(true, |a| a[i]))
                .collect();
            let on = active.iter().filter(|&&a| a).count();
            let b = active.len();
            let picked = pooled.matmul(&g.constant(selector(c, &head.channels)))?;
            let mut term: Option<Var> = None;
            if on > 0 {
                let k = head.classes;
                let mut pick = vec![0.0; b * k];
                for (i, &src) in self.idx.iter().enumerate() {
                    if active[i] {
                        pick[i * k + head.labels[src]] = 1.0 / on as f64;
                    }
                }
                let logits = picked
                    .matmul(theta.get(&format!("plant.h{h}.w"))?)?
                    .add_row(theta.get(&format!("plant.h{h}.b"))?)?;
                term = Some(logits.log_softmax()?.mask_mul(Rc::new(Tensor::new(&[b, k], pick)?))?.sum()?.neg());
            }
            if on < b && head.silence > 0.0 {
                let k = head.channels.len();
                let w = head.silence / ((b - on) * k) as f64;
                let mask = Tensor::from_fn(&[b, k], |i| if active[i / k] { 0.0 } else { w });
                let quiet = picked.square()?.mask_mul(Rc::new(mask))?.sum()?;
                term = Some(match term {
                    Some(t) => t.add(&quiet)?,
                    None => quiet,
                });
            }
            let Some(term) = term else { continue };
            loss = Some(match loss {
                Some(l) => l.add(&term)?,
                None => term,
            });
        }
        loss.ok_or_else(|| Error::Spec("planting needs at least one head".into()))
    }

    fn wfm(&self, g: &Graph, _: &Bound, _: &Bound) -> Result<Var> {
        Ok(g.constant(Tensor::scalar(0.0)))
    }

    fn beta(&self) -> f64 {
        0.0
    }
}

fn group_names(net: &FeatureExtractor, groups: Range<usize>) -> Vec<String> {
    let mut out = Vec::new();
    for gi in groups {
        for bi in 0..net.spec.groups[gi].blocks {
            let name = FeatureExtractor::conv_name(&net.prefix, gi, bi);
            out.push(format!("{name}.w"));
            out.push(format!("{name}.b"));
        }
    }
    out
}

/// Edits `source` so that tap `cfg.layer` carries what the heads ask for and
/// every later tap is a rank-1 random projection: the groups up to the
/// planted layer are trained against the heads on `images`, each conv after
/// it is replaced by `a ⊗ v` with Gaussian `a`, `v` and zero bias, where the
/// first such conv reads only the `cfg.feed` channels. Finally each tap is
/// rescaled to unit root-mean-square over `images`.
pub fn plant(source: &FeatureExtractor, images: &Tensor, heads: &[PlantHead], cfg: &PlantConfig) -> Result<FeatureExtractor> {
    let groups = source.spec.groups.len();
    if cfg.layer == 0 || cfg.layer > groups {
        return Err(Error::Config(format!(
            "planted layer {} outside 1..={groups}",
            cfg.layer
        )));
    }
    let n = images.shape()[0];
    let c = source.spec.groups[cfg.layer - 1].channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = ParamSet::new();
    for name in group_names(source, 0..cfg.layer) {
        theta.insert(name.clone(), source.params.get(&name)?.clone());
    }
    for (h, head) in heads.iter().enumerate() {
        let mask_ok = head.active.as_ref().map_or(true, |a| a.len() == n);
        if head.channels.is_empty() || head.channels.end > c || head.labels.len() != n || !mask_ok {
            return Err(Error::Config(format!(
                "plant head {h}: channels {:?} of {c}, {} labels for {n} images",
                head.channels,
                head.labels.len()
            )));
        }
        let std = (1.0 / head.channels.len() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        theta.insert(
            format!("plant.h{h}.w"),
            Tensor::from_fn(&[head.channels.len(), head.classes], |_| normal.sample(&mut rng)),
        );
        theta.insert(format!("plant.h{h}.b"), Tensor::zeros(&[head.classes]));
    }
    let feed = match &cfg.feed {
        Some(r) => {
            for gi in 0..cfg.layer {
                if r.is_empty() || r.end > source.spec.groups[gi].channels {
                    return Err(Error::Config(format!(
                        "feed channels {r:?} do not fit group g{}",
                        gi + 1
                    )));
                }
            }
            colour_channels(source, cfg.layer, r, &mut rng)?
        }
        None => Vec::new(),
    };
    impose(&mut theta, &feed)?;
    let mut state = TrainState::new(theta, ParamSet::new(), cfg.seed);
    let bilevel = BilevelConfig::default();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, cfg.lr);
        for idx in batches(n, cfg.batch_size, &mut state.rng) {
            let x = crate::data::gather_rows(images, &idx);
            let problem = PlantProblem {
                net: source,
                layer: cfg.layer,
                heads,
                x,
                idx: &idx,
            };
            theta_step(&mut state, &problem, &bilevel, lr)?;
            impose(&mut state.theta, &feed)?;
        }
    }
    let mut out = source.clone();
    for (name, value) in state.theta.iter() {
        if !name.starts_with("plant.") {
            *out.params.get_mut(name)? = value.clone();
        }
    }
    for gi in cfg.layer..groups {
        for bi in 0..source.spec.groups[gi].blocks {
            let name = FeatureExtractor::conv_name(&source.prefix, gi, bi);
            let shape = out.params.get(&format!("{name}.w"))?.shape().to_vec();
            let fan_in = shape[1] * shape[2] * shape[3];
            let unit = Normal::new(0.0, 1.0).expect("unit normal");
            let a: Vec<f64> = (0..shape[0]).map(|_| unit.sample(&mut rng)).collect();
            let taps = shape[2] * shape[3];
            let feed = match &cfg.feed {
                Some(r) if gi == cfg.layer && bi == 0 => r.clone(),
                _ => 0..shape[1],
            };
            let scale = 1.0 / ((feed.len() * taps) as f64).sqrt();
            let v: Vec<f64> = (0..fan_in)
                .map(|i| {
                    let z = unit.sample(&mut rng) * scale;
                    if feed.contains(&(i / taps)) {
                        z
                    } else {
                        0.0
                    }
                })
                .collect();
            *out.params.get_mut(&format!("{name}.w"))? = Tensor::from_fn(&shape, |i| a[i / fan_in] * v[i % fan_in]);
            *out.params.get_mut(&format!("{name}.b"))? = Tensor::zeros(&[shape[0]]);
        }
    }
    normalize_taps(&mut out, images)?;
    Ok(out)
}

/// Weight rows `(param name, flat offset, values)` that make the `feed`
/// output channels of every conv up to `layer` a biased, spatially uniform
/// mix of the previous feed channels (of the input colours for the first
/// conv), and keep the other channels from reading them.
fn colour_channels(
    net: &FeatureExtractor,
    layer: usize,
    feed: &Range<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, usize, Vec<f64>)>> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::new();
    let mut first = true;
    for gi in 0..layer {
        for bi in 0..net.spec.groups[gi].blocks {
            let name = FeatureExtractor::conv_name(&net.prefix, gi, bi);
            let shape = net.params.get(&format!("{name}.w"))?.shape().to_vec();
            let (c_in, k) = (shape[1], shape[2] * shape[3]);
            let inputs = if first { 0..c_in } else { feed.clone() };
            for o in feed.clone() {
                let scale = 1.0 / (inputs.len() as f64).sqrt() / k as f64;
                let mut row = vec![0.0; c_in * k];
                for i in inputs.clone() {
                    let a = unit.sample(rng) * scale;
                    row[i * k..(i + 1) * k].fill(a);
                }
                rows.push((format!("{name}.w"), o * c_in * k, row));
                rows.push((format!("{name}.b"), o, vec![COLOUR_BIAS]));
            }
            if !first {
                for o in (0..shape[0]).filter(|o| !feed.contains(o)) {
                    rows.push((format!("{name}.w"), (o * c_in + feed.start) * k, vec![0.0; feed.len() * k]));
                }
            }
            first = false;
        }
    }
    Ok(rows)
}

/// Keeps the colour channels linear over standardized inputs.
const COLOUR_BIAS: f64 = 1.0;

fn impose(params: &mut ParamSet, rows: &[(String, usize, Vec<f64>)]) -> Result<()> {
    for (name, at, values) in rows {
        params.get_mut(name)?.data_mut()[*at..*at + values.len()].copy_from_slice(values);
    }
    Ok(())
}

/// Rescales the last conv of every group so each tap has unit RMS over
/// `images`. Later taps are unaffected by earlier rescaling since every
/// group is positively homogeneous.
pub fn normalize_taps(net: &mut FeatureExtractor, images: &Tensor) -> Result<()> {
    for gi in 0..net.spec.groups.len() {
        let mut sq = 0.0;
        let mut count = 0usize;
        for_chunks(images, |x| {
            let (taps, _) = net.forward_features(x)?;
            sq += taps[gi].data().iter().map(|v| v * v).sum::<f64>();
            count += taps[gi].len();
            Ok(())
        })?;
        let rms = (sq / count as f64).sqrt();
        if rms > 0.0 {
            let name = FeatureExtractor::conv_name(&net.prefix, gi, net.spec.groups[gi].blocks - 1);
            for suffix in [".w", ".b"] {
                let t = net.params.get_mut(&format!("{name}{suffix}"))?;
                *t = t.scale(1.0 / rms);
            }
            if gi + 1 < net.spec.groups.len() {
                let next = FeatureExtractor::conv_name(&net.prefix, gi + 1, 0);
                let t = net.params.get_mut(&format!("{next}.w"))?;
                *t = t.scale(rms);
            }
        }
    }
    Ok(())
}

fn for_chunks(images: &Tensor, mut f: impl FnMut(&Tensor) -> Result<()>) -> Result<()> {
    let n = images.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        f(&crate::data::gather_rows(images, chunk))?;
    }
    Ok(())
}

/// Global-average-pooled tap features `[N, C]` for every tap.
pub fn pooled_taps(net: &FeatureExtractor, images: &Tensor) -> Result<Vec<Tensor>> {
    let shapes = net.spec.tap_shapes();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); shapes.len()];
    for_chunks(images, |x| {
        let (taps, _) = net.forward_features(x)?;
        for (d, t) in data.iter_mut().zip(taps) {
            let s = t.shape().to_vec();
            let hw = s[2] * s[3];
            d.extend(t.data().chunks(hw).map(|m| m.iter().sum::<f64>() / hw as f64));
        }
        Ok(())
    })?;
    let n = images.shape()[0];
    data.into_iter()
        .zip(&shapes)
        .map(|(d, s)| Ok(Tensor::new(&[n, s[0]], d)?))
        .collect()
}

/// Training accuracy of a multinomial logistic regression on standardized
/// `features` `[N, D]`, fitted full-batch with Adam.
pub fn linear_probe(features: &Tensor, labels: &[usize], classes: usize, steps: usize) -> Result<f64> {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let mut z = features.clone();
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| features.data()[i * d + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            z.data_mut()[i * d + j] = (features.data()[i * d + j] - mean) / std;
        }
    }
    let mut params = ParamSet::new();
    params.insert("w", Tensor::zeros(&[d, classes]));
    params.insert("b", Tensor::zeros(&[classes]));
    let mut adam = AdamState::new(&params);
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let logits = |p: &ParamSet, g: &Graph| -> Result<(Bound, Var)> {
        let b = p.bind(g, true);
        let out = g.constant(z.clone()).matmul(b.get("w")?)?.add_row(b.get("b")?)?;
        Ok((b, out))
    };
    for _ in 0..steps {
        let g = Graph::new();
        let (b, out) = logits(&params, &g)?;
        let loss = out.cross_entropy(labels)?;
        let d = grads_to_set(&params, l2tww_autodiff::grad(&loss, &b.vars(), false)?)?;
        adam.step(&cfg, &mut params, &d)?;
    }
    let g = Graph::new();
    let out = logits(&params, &g)?.1.value();
    let correct = out
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                == Some(y)
        })
        .count();
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_picks_block() {
        let s = selector(4, &(1..3));
        assert_eq!(s.data(), &[0., 0., 1., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn probe_separates_linearly_separable_points() {
        let x = Tensor::new(&[4, 2], vec![1., 0., 2., 0.1, 0., 1., 0.1, 2.]).unwrap();
        assert_eq!(linear_probe(&x, &[0, 0, 1, 1], 2, 100).unwrap(), 1.0);
    }

    #[test]
    fn planted_edit_normalizes_and_randomizes() {
        let spec = ExtractorSpec::uniform([3, 8, 8], &[4, 6], 1, 2);
        let net = FeatureExtractor::build(spec, "s.", 3).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let images = Tensor::from_fn(&[12, 3, 8, 8], |_| normal.sample(&mut rng));
        let heads = [PlantHead::new(0..4, (0..12).map(|i| i % 2).collect(), 2)];
        let cfg = PlantConfig {
            epochs: 2,
            batch_size: 6,
            ..PlantConfig::default()
        };
        let out = plant(&net, &images, &heads, &cfg).unwrap();
        let (taps, _) = out.forward_features(&images).unwrap();
        for t in &taps {
            let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
            assert!((rms - 1.0).abs() < 1e-9, "{rms}");
        }
        let w = out.params.get("s.g2.b1.w").unwrap();
        let row = |o: usize| w.data()[o * 36..(o + 1) * 36].to_vec();
        let (r0, r1) = (row(0), row(1));
        let ratio = r1[0] / r0[0];
        assert!(r0.iter().zip(&r1).all(|(a, b)| (b - ratio * a).abs() < 1e-9));
        assert!(out.params.get("s.g2.b1.b").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn full_mask_matches_plain_cross_entropy() {
        let spec = ExtractorSpec::uniform([3, 8, 8], &[4], 1, 2);
        let net = FeatureExtractor::build(spec, "s.", 1).unwrap();
        let x = Tensor::from_fn(&[5, 3, 8, 8], |i| (i as f64 * 0.37).sin());
        let labels: Vec<usize> = (0..5).map(|i| i % 3).collect();
        let mut theta = net.params.clone();
        theta.insert("plant.h0.w", Tensor::from_fn(&[4, 3], |i| (i as f64).cos()));
        theta.insert("plant.h0.b", Tensor::zeros(&[3]));
        let idx: Vec<usize> = (0..5).collect();
        let value = |head: PlantHead| {
            let heads = [head];
            let p = PlantProblem {
                net: &net,
                layer: 1,
                heads: &heads,
                x: x.clone(),
                idx: &idx,
            };
            let g = Graph::new();
            p.org(&g, &theta.bind(&g, false)).unwrap().value().item()
        };
        let plain = value(PlantHead::new(0..4, labels.clone(), 3));
        let masked = value(PlantHead {
            active: Some(vec![true; 5]),
            silence: 1.0,
            ..PlantHead::new(0..4, labels.clone(), 3)
        });
        assert!((plain - masked).abs() < 1e-12);
        let silent = value(PlantHead {
            active: Some(vec![false; 5]),
            silence: 1.0,
            ..PlantHead::new(0..4, labels, 3)
        });
        let (taps, _) = net.forward_features(&x).unwrap();
        let expect = taps[0].data().chunks(64).map(|c| (c.iter().sum::<f64>() / 64.0).powi(2)).sum::<f64>() / 20.0;
        assert!((silent - expect).abs() < 1e-12);
    }

    #[test]
    fn source_checkpoint_round_trip() {
        let net = FeatureExtractor::build(ExtractorSpec::uniform([3, 8, 8], &[4, 6], 2, 3), "s.", 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("src.bin");
        save_source(&net, 3, &path, true).unwrap();
        let back = load_source(&path, "s.").unwrap();
        assert_eq!(back.spec, net.spec);
        assert!(back.params.bitwise_eq(&net.params));
        assert!(back.frozen);
        let renamed = load_source(&path, "s1.").unwrap();
        assert_eq!(renamed.params.get("s1.g2.b2.w").unwrap(), net.params.get("s.g2.b2.w").unwrap());
        assert_eq!(renamed.params.len(), net.params.len());
    }
}
