//! The epoch loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use l2tww_autodiff::{Graph, Tensor};

use crate::bilevel::{meta_step, BilevelConfig, TrainState, TransferProblem};
use crate::data::{augment, batches, gather_rows, Dataset};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, FeatureExtractor};
use crate::params::ParamSet;
use crate::transfer::loss::PairStats;
use crate::transfer::{Pair, TransferBatchReport, TransferModel};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate of the cosine schedule.
    pub lr: f64,
    pub bilevel: BilevelConfig,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            bilevel: BilevelConfig::default(),
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(epoch as f64, self.epochs as f64, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 0 for the initial state.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss_org: f64,
    pub train_loss_wfm: f64,
    pub test_acc: f64,
    pub pairs: Vec<PairStats>,
}

/// Top-1 accuracy of the target network under `theta`.
pub fn evaluate(net: &FeatureExtractor, theta: &ParamSet, ds: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk);
        let g = Graph::new();
        let logits = net.forward(&theta.bind(&g, false), &g.constant(x))?.logits.value();
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Source taps of the whole dataset, `[source][tap]`, each `[N,C,H,W]`.
pub fn cache_source_features(model: &TransferModel, ds: &Dataset) -> Result<Vec<Vec<Tensor>>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut parts: Vec<Vec<Vec<f64>>> = model
        .sources
        .iter()
        .map(|s| vec![Vec::new(); s.spec.groups.len()])
        .collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = ds.gather(chunk);
        for (si, taps) in model.source_features(&x)?.into_iter().enumerate() {
            for (ti, t) in taps.into_iter().enumerate() {
                parts[si][ti].extend(t.into_data());
            }
        }
    }
    model
        .sources
        .iter()
        .zip(parts)
        .map(|(s, taps)| {
            s.spec
                .tap_shapes()
                .iter()
                .zip(taps)
                .map(|(sh, data)| Ok(Tensor::new(&[ds.len(), sh[0], sh[1], sh[2]], data)?))
                .collect()
        })
        .collect()
}

fn gather_sources(cache: &[Vec<Tensor>], idx: &[usize]) -> Vec<Vec<Tensor>> {
    cache
        .iter()
        .map(|taps| taps.iter().map(|t| gather_rows(t, idx)).collect())
        .collect()
}

/// Running batch-size-weighted means of batch reports.
#[derive(Default)]
struct Accumulator {
    n: usize,
    org: f64,
    wfm: f64,
    pairs: Vec<PairStats>,
}

impl Accumulator {
    fn add(&mut self, r: &TransferBatchReport, b: usize) {
        let w = b as f64;
        self.n += b;
        self.org += w * r.org;
        self.wfm += w * r.wfm;
        if self.pairs.is_empty() {
            self.pairs = r
                .pairs
                .iter()
                .map(|p| PairStats {
                    pair: p.pair,
                    lambda_mean: 0.0,
                    lambda_std: 0.0,
                    loss: 0.0,
                })
                .collect();
        }
        for (acc, p) in self.pairs.iter_mut().zip(&r.pairs) {
            acc.lambda_mean += w * p.lambda_mean;
            acc.lambda_std += w * p.lambda_std;
            acc.loss += w * p.loss;
        }
    }

    fn finish(mut self, epoch: usize, lr: f64, test_acc: f64) -> EpochMetrics {
        let n = self.n.max(1) as f64;
        for p in &mut self.pairs {
            p.lambda_mean /= n;
            p.lambda_std /= n;
            p.loss /= n;
        }
        EpochMetrics {
            epoch,
            lr,
            train_loss_org: self.org / n,
            train_loss_wfm: self.wfm / n,
            test_acc,
            pairs: self.pairs,
        }
    }
}

/// Trains from `state` (resuming at `state.epoch`) up to `cfg.epochs`.
/// `on_epoch` sees the metrics and state after each completed epoch, and the
/// initial metrics (epoch 0) when starting fresh.
pub fn train(
    model: &TransferModel,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.bilevel.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let cache = if cfg.augment {
        None
    } else {
        Some(cache_source_features(model, train_set)?)
    };
    let mut history = Vec::new();
    if state.epoch == 0 {
        let mut acc = Accumulator::default();
        let idx: Vec<usize> = (0..train_set.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (x, y) = train_set.gather(chunk);
            let src = match &cache {
                Some(c) => gather_sources(c, chunk),
                None => model.source_features(&x)?,
            };
            acc.add(&model.report(&state.theta, &state.phi, &x, &y, &src)?, chunk.len());
        }
        let m = acc.finish(0, cfg.lr_at(0), evaluate(&model.target, &state.theta, test_set)?);
        on_epoch(&m, state)?;
        history.push(m);
    }
    while (state.epoch as usize) < cfg.epochs {
        let epoch = state.epoch as usize;
        let lr = cfg.lr_at(epoch);
        let mut acc = Accumulator::default();
        for idx in batches(train_set.len(), cfg.batch_size, &mut state.rng) {
            let (mut x, y) = train_set.gather(&idx);
            let src = match &cache {
                Some(c) => gather_sources(c, &idx),
                None => {
                    x = augment(&x, &mut state.rng);
                    model.source_features(&x)?
                }
            };
            let problem = TransferProblem::new(model, &x, &y, &src);
            meta_step(state, &problem, &cfg.bilevel, lr).map_err(|e| match e {
                Error::NonFinite { what, location } => Error::NonFinite {
                    what,
                    location: format!("{location}, epoch {}", epoch + 1),
                },
                other => other,
            })?;
            if let Some(r) = problem.take_report() {
                acc.add(&r, idx.len());
            }
        }
        state.epoch += 1;
        let m = acc.finish(epoch + 1, lr, evaluate(&model.target, &state.theta, test_set)?);
        on_epoch(&m, state)?;
        history.push(m);
    }
    Ok(history)
}

/// Per-epoch CSV: `epoch,lr,train_loss_org,train_loss_wfm,test_acc` followed
/// by `lambda_mean__<pair>,lambda_std__<pair>,pairloss__<pair>` for every pair
/// in configuration order.
pub struct MetricsWriter {
    out: BufWriter<File>,
    pairs: Vec<Pair>,
}

pub fn metrics_header(pairs: &[Pair]) -> Vec<String> {
    let mut cols: Vec<String> = ["epoch", "lr", "train_loss_org", "train_loss_wfm", "test_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for p in pairs {
        let k = p.key();
        cols.push(format!("lambda_mean__{k}"));
        cols.push(format!("lambda_std__{k}"));
        cols.push(format!("pairloss__{k}"));
    }
    cols
}

impl MetricsWriter {
    /// Creates the file, or appends to it when it already has the same header.
    pub fn open(path: &Path, pairs: &[Pair]) -> Result<Self> {
        let header = metrics_header(pairs).join(",");
        let existing = std::fs::read_to_string(path).ok();
        let io = |e| Error::io(path, e);
        let out = match existing.as_deref().and_then(|s| s.lines().next()) {
            Some(h) if h == header => std::fs::OpenOptions::new().append(true).open(path).map_err(io)?,
            _ => {
                let mut f = File::create(path).map_err(io)?;
                writeln!(f, "{header}").map_err(io)?;
                f
            }
        };
        Ok(Self {
            out: BufWriter::new(out),
            pairs: pairs.to_vec(),
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        let mut row = vec![
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_loss_org.to_string(),
            m.train_loss_wfm.to_string(),
            m.test_acc.to_string(),
        ];
        for p in &self.pairs {
            match m.pairs.iter().find(|s| s.pair == *p) {
                Some(s) => {
                    row.push(s.lambda_mean.to_string());
                    row.push(s.lambda_std.to_string());
                    row.push(s.loss.to_string());
                }
                None => row.extend(["", "", ""].map(String::from)),
            }
        }
        writeln!(self.out, "{}", row.join(",")).map_err(|e| Error::io("metrics.csv", e))?;
        self.out.flush().map_err(|e| Error::io("metrics.csv", e))
    }
}
