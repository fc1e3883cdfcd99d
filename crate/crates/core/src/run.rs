//! Experiment commands on top of a [`RunConfig`]. Every command writes only
//! under the configured output directory, starting with `config.resolved`.

use std::fs::OpenOptions;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::bilevel::{evaluate, train, EpochMetrics, MetricsWriter, TrainState};
use crate::config::{RunConfig, Task};
use crate::data::{gen_synthetic, load_cifar_binary, load_idx, subsample_per_class, Checkpoint, Dataset, SyntheticTask, Variant};
use crate::error::{Error, Result};
use crate::nn::{AdaptorInit, FeatureExtractor, MetaConfig};
use crate::params::ParamSet;
use crate::source::{linear_probe, load_source, plant, pooled_taps, pretrain, save_source, PlantConfig, PlantHead};
use crate::transfer::saliency::{saliency, signed_to_unit, write_pgm};
use crate::transfer::{make_config, MatchConfig, Pair, TransferModel};

pub const SOURCE_FILE: &str = "source.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SOURCE_METRICS_FILE: &str = "source_metrics.csv";
pub const PROBES_FILE: &str = "probes.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const RESOLVED_FILE: &str = "config.resolved";

/// Datasets of one run.
#[derive(Clone, Debug)]
pub struct TaskData {
    /// What a source network is pretrained on: the coarse-label split of a
    /// synthetic task, otherwise the training split.
    pub source: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub synthetic: Option<SyntheticTask>,
}

pub fn load_task(cfg: &RunConfig) -> Result<TaskData> {
    let (source, train, test, synthetic) = match cfg.task()? {
        Task::Synthetic => {
            let t = gen_synthetic(&cfg.synthetic()?)?;
            (t.source.data.clone(), t.target_train.data.clone(), t.target_test.data.clone(), Some(t))
        }
        Task::Idx => {
            let [xi, yi, xt, yt] = cfg.idx_paths()?;
            let classes = cfg.idx_classes();
            let train = load_idx(&xi, &yi, classes, "train", None)?;
            let test = load_idx(&xt, &yt, classes, "test", Some(train.stats.clone()))?;
            (train.clone(), train, test, None)
        }
        Task::CifarBinary => {
            let dir = cfg.cifar_dir()?;
            let train = load_cifar_binary(&dir, "train", None)?;
            let test = load_cifar_binary(&dir, "test", Some(train.stats.clone()))?;
            (train.clone(), train, test, None)
        }
    };
    let train = match cfg.subsample()? {
        Some((n, seed)) => subsample_per_class(&train, n, seed)?,
        None => train,
    };
    Ok(TaskData {
        source,
        train,
        test,
        synthetic,
    })
}

/// Creates the output directory and writes the resolved config into it.
pub fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(RESOLVED_FILE);
    std::fs::write(&path, cfg.resolved()).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Heads that plant the fine labels into tap channels `0..C-C/4` of a
/// synthetic source, the rest being colour feed channels. In the
/// two-population variant each population gets its own half of the
/// informative channels; on the other population that half encodes the
/// palette, which says nothing about the fine label.
pub fn plant_heads(task: &SyntheticTask, channels: usize) -> Result<(Vec<PlantHead>, Range<usize>)> {
    let feed = channels - channels / 4..channels;
    let informative = feed.start;
    let labels = task.source.fine();
    let classes = task.spec.fine_classes();
    let heads = match task.spec.variant {
        Variant::Standard => vec![PlantHead::new(0..informative, labels, classes)],
        Variant::TwoPopulation => {
            let half = informative / 2;
            if half == 0 {
                return Err(Error::Config(format!("{channels} planted channels cannot hold two populations")));
            }
            let pops = task.source.populations();
            let palettes = task.source.palettes();
            let mut heads = Vec::new();
            for p in 0..2 {
                let channels = p * half..(p + 1) * half;
                heads.push(PlantHead {
                    active: Some(pops.iter().map(|&q| q == p).collect()),
                    ..PlantHead::new(channels.clone(), labels.clone(), classes)
                });
                heads.push(PlantHead {
                    active: Some(pops.iter().map(|&q| q != p).collect()),
                    ..PlantHead::new(channels, palettes.clone(), task.spec.palettes)
                });
            }
            heads
        }
    };
    if feed.is_empty() || informative == 0 {
        return Err(Error::Config(format!("{channels} planted channels are too few to plant")));
    }
    Ok((heads, feed))
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub train_acc: f64,
    /// Linear-probe training accuracy on the target training split, per tap.
    pub probes: Vec<f64>,
}

/// Pretrains a source network, plants the configured layer for synthetic
/// tasks, and writes `source.bin`, `source_metrics.csv` and `probes.csv`.
pub fn pretrain_source(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<PretrainSummary> {
    let dir = prepare_out_dir(cfg)?;
    let data = load_task(cfg)?;
    let spec = cfg.source_spec(data.source.image_shape(), data.source.classes)?;
    let mut net = FeatureExtractor::build(spec, "s.", cfg.seed())?;
    let metrics_path = dir.join(SOURCE_METRICS_FILE);
    let _ = std::fs::remove_file(&metrics_path);
    let mut writer = MetricsWriter::open(&metrics_path, &[])?;
    let history = pretrain(&mut net, &data.source, &cfg.source_train()?, cfg.seed(), |m, _| {
        on_epoch(m);
        writer.write(m)
    })?;
    let train_acc = history.last().map(|m| m.test_acc).unwrap_or(0.0);
    if let Some(task) = &data.synthetic {
        if let Some(layer) = task.spec.planted_layer {
            let groups = net.spec.groups.len();
            if layer > groups {
                return Err(Error::Config(format!("planted layer {layer} outside 1..={groups}")));
            }
            let (heads, feed) = plant_heads(task, net.spec.groups[layer - 1].channels)?;
            let (epochs, lr) = cfg.plant()?;
            let pc = PlantConfig {
                layer,
                epochs,
                lr,
                seed: cfg.seed(),
                feed: Some(feed),
                ..PlantConfig::default()
            };
            net = plant(&net, &data.source.images, &heads, &pc)?;
        }
    }
    let probes: Vec<f64> = pooled_taps(&net, &data.train.images)?
        .iter()
        .map(|f| linear_probe(f, &data.train.labels, data.train.classes, 300))
        .collect::<Result<_>>()?;
    let probe_path = dir.join(PROBES_FILE);
    let mut text = String::from("tap,probe_acc\n");
    for (i, p) in probes.iter().enumerate() {
        text.push_str(&format!("g{},{p}\n", i + 1));
    }
    std::fs::write(&probe_path, text).map_err(|e| Error::io(&probe_path, e))?;
    let checkpoint = dir.join(SOURCE_FILE);
    save_source(&net, history.len().saturating_sub(1) as u64, &checkpoint, cfg.checkpoint_f64())?;
    Ok(PretrainSummary {
        checkpoint,
        train_acc,
        probes,
    })
}

/// The transfer model of `cfg`, with sources loaded from their checkpoints.
pub fn build_model(cfg: &RunConfig, data: &TaskData) -> Result<TransferModel> {
    let spec = cfg.target_spec(data.train.image_shape(), data.train.classes)?;
    let target = FeatureExtractor::build(spec, "t.", cfg.seed())?;
    let mode = cfg.mode()?;
    if !mode.uses_sources() {
        return Ok(TransferModel::scratch(target));
    }
    let paths = cfg.source_checkpoints();
    if paths.is_empty() {
        return Err(Error::Config(format!("mode {mode} needs source.checkpoints")));
    }
    let sources = paths
        .iter()
        .enumerate()
        .map(|(i, p)| load_source(p, &format!("s{i}.")))
        .collect::<Result<Vec<_>>>()?;
    let t_taps = target.spec.tap_shapes();
    let configs = sources
        .iter()
        .enumerate()
        .map(|(i, s)| make_config(mode.style(), i, &s.spec.tap_shapes(), &t_taps, cfg.beta()?))
        .collect::<Result<Vec<_>>>()?;
    TransferModel::new(target, sources, MatchConfig::union(configs)?, cfg.meta()?)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<EpochMetrics>,
    pub pairs: Vec<Pair>,
    pub state: TrainState,
}

impl TrainSummary {
    pub fn final_acc(&self) -> f64 {
        self.history.last().map(|m| m.test_acc).unwrap_or(0.0)
    }
}

/// Runs transfer training, writing `metrics.csv` and `checkpoint.bin` after
/// every epoch. With `resume` an existing checkpoint in the output directory
/// is continued; otherwise the run starts over. A numerical abort leaves
/// the checkpoint of the last completed epoch in place.
pub fn train_run(cfg: &RunConfig, resume: bool, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainSummary> {
    let dir = prepare_out_dir(cfg)?;
    let data = load_task(cfg)?;
    let model = build_model(cfg, &data)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    let mut state = if resume && ckpt_path.exists() {
        let state = TrainState::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
        check_state(&model, &state)?;
        state
    } else {
        let _ = std::fs::remove_file(&metrics_path);
        let (theta, phi) = model.initial_params(AdaptorInit::Zero);
        TrainState::new(theta, phi, cfg.seed())
    };
    let mut writer = MetricsWriter::open(&metrics_path, model.pairs())?;
    let f64_ckpt = cfg.checkpoint_f64();
    let history = train(&model, &data.train, &data.test, &cfg.train_for(data.train.len())?, &mut state, |m, s| {
        writer.write(m)?;
        s.to_checkpoint().save(&ckpt_path, f64_ckpt)?;
        on_epoch(m);
        Ok(())
    })?;
    Ok(TrainSummary {
        history,
        pairs: model.pairs().to_vec(),
        state,
    })
}

fn check_params(what: &str, expected: &ParamSet, found: &ParamSet) -> Result<()> {
    for (name, t) in expected.iter() {
        let f = found
            .get(name)
            .map_err(|_| Error::Spec(format!("{what} lacks {name}")))?;
        if f.shape() != t.shape() {
            return Err(Error::Spec(format!(
                "{what}: {name} has shape {:?}, config expects {:?}",
                f.shape(),
                t.shape()
            )));
        }
    }
    if found.len() != expected.len() {
        return Err(Error::Spec(format!(
            "{what} holds {} tensors, config expects {}",
            found.len(),
            expected.len()
        )));
    }
    Ok(())
}

fn check_state(model: &TransferModel, state: &TrainState) -> Result<()> {
    let (theta, phi) = model.initial_params(AdaptorInit::Zero);
    check_params("checkpoint theta", &theta, &state.theta)?;
    check_params("checkpoint phi", &phi, &state.phi)
}

fn load_state(model: &TransferModel, checkpoint: &Path) -> Result<TrainState> {
    let state = TrainState::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    check_state(model, &state)?;
    Ok(state)
}

/// Top-1 accuracy of a training checkpoint on `split` (`train` or `test`),
/// appended to `eval.csv`.
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<f64> {
    let dir = prepare_out_dir(cfg)?;
    let data = load_task(cfg)?;
    let model = build_model(cfg, &data)?;
    let state = load_state(&model, checkpoint)?;
    let ds = match split {
        "train" => &data.train,
        "test" => &data.test,
        other => return Err(Error::Config(format!("unknown split {other:?} (train, test)"))),
    };
    let acc = evaluate(&model.target, &state.theta, ds)?;
    let path = dir.join(EVAL_FILE);
    let fresh = !path.exists();
    let io = |e| Error::io(&path, e);
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
    if fresh {
        writeln!(f, "checkpoint,split,epoch,accuracy").map_err(io)?;
    }
    writeln!(f, "{},{split},{},{acc}", checkpoint.display(), state.epoch).map_err(io)?;
    Ok(acc)
}

/// Writes the saliency map of `pair` for test image `index`; with
/// `compare_uniform` also the map under uniform channel weights and their
/// signed difference (0.5 = equal). Returns the written paths.
pub fn saliency_run(cfg: &RunConfig, checkpoint: &Path, index: usize, pair: &Pair, compare_uniform: bool) -> Result<Vec<PathBuf>> {
    let dir = prepare_out_dir(cfg)?;
    let data = load_task(cfg)?;
    let model = build_model(cfg, &data)?;
    model.matching.position(pair)?;
    let state = load_state(&model, checkpoint)?;
    if index >= data.test.len() {
        return Err(Error::Config(format!(
            "image index {index} outside the {} test images",
            data.test.len()
        )));
    }
    let (x, _) = data.test.gather(&[index]);
    let base = format!("saliency_{index}_{}", pair.key());
    let map = saliency(&model, &state.theta, &state.phi, &x, pair)?;
    let mut written = vec![dir.join(format!("{base}.pgm"))];
    write_pgm(&written[0], &map)?;
    if compare_uniform {
        let uniform = TransferModel {
            meta: MetaConfig::uniform(1.0),
            ..model.clone()
        };
        let umap = saliency(&uniform, &state.theta, &ParamSet::new(), &x, pair)?;
        let diff = signed_to_unit(&map.sub(&umap)?);
        for (suffix, m) in [("uniform", &umap), ("diff", &diff)] {
            let p = dir.join(format!("{base}_{suffix}.pgm"));
            write_pgm(&p, m)?;
            written.push(p);
        }
    }
    Ok(written)
}
