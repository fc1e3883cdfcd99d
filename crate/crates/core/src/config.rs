//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys and repeated keys are errors. Every key has a default, and
//! [`RunConfig::resolved`] prints the full set.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::bilevel::{BilevelConfig, InnerLr, Scheme, TrainConfig};
use crate::data::{SyntheticSpec, Variant};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ExtractorSpec, GroupSpec, MetaConfig, SgdConfig, WeightSource};
use crate::transfer::MatchStyle;

/// `(key, default, description)`
const KEYS: &[(&str, &str, &str)] = &[
    ("task", "synthetic", "synthetic | idx | cifar-binary"),
    ("synthetic.seed", "0", ""),
    ("synthetic.size", "16", "image side in pixels"),
    ("synthetic.families", "5", "source classes"),
    ("synthetic.subfamilies", "2", "target classes per source class"),
    ("synthetic.palettes", "4", ""),
    ("synthetic.source_per_class", "200", "source images per fine class"),
    ("synthetic.train_per_class", "25", ""),
    ("synthetic.test_per_class", "50", ""),
    ("synthetic.noise", "0.25", "pixel noise std"),
    ("synthetic.orientation_jitter", "0.15", "radians"),
    ("synthetic.position_jitter", "3", "pixels"),
    ("synthetic.color_jitter", "0.15", ""),
    ("synthetic.planted_layer", "1", "tap made informative by pretrain-source, or none"),
    ("synthetic.variant", "standard", "standard | two-population"),
    ("idx.train_images", "", ""),
    ("idx.train_labels", "", ""),
    ("idx.test_images", "", ""),
    ("idx.test_labels", "", ""),
    ("idx.classes", "10", ""),
    ("cifar.dir", "", "directory with data_batch_*.bin and test_batch.bin"),
    ("data.train_per_class", "0", "subsample the training split, 0 keeps all"),
    ("data.subsample_seed", "0", ""),
    ("source.checkpoints", "", "comma-separated source checkpoints"),
    ("source.groups", "16x2,32x2,64x2", "channels x blocks per group; downscale after all but the last"),
    ("source.hidden", "", "hidden widths of the classifier head"),
    ("source.epochs", "30", "pretrain-source epochs"),
    ("source.lr", "0.03", ""),
    ("source.batch_size", "64", ""),
    ("plant.epochs", "10", ""),
    ("plant.lr", "0.05", ""),
    ("target.groups", "8x1,16x1,32x1", ""),
    ("target.hidden", "", ""),
    ("mode", "l2tww-all-to-all", "scratch | fm-single | fm-one-to-one | l2tw-single | l2tw-one-to-one | l2tww-all-to-all | ablation-metaweights | ablation-twostage"),
    ("beta", "0.5", ""),
    ("inner_steps", "2", ""),
    ("inner_lr", "tied", "tied to the scheduled lr, or a number"),
    ("lambda_init", "1", "initial pre-activation of learned lambda"),
    ("fixed_lambda", "1", "lambda of modes without a learned pair weight"),
    ("epochs", "200", ""),
    ("step_budget", "0", "when positive, epochs = ceil(step_budget / batches per epoch)"),
    ("batch_size", "128", ""),
    ("lr", "0.1", "base lr of the cosine schedule"),
    ("momentum", "0.9", ""),
    ("weight_decay", "1e-4", ""),
    ("meta_lr", "1e-3", ""),
    ("meta_weight_decay", "0", ""),
    ("augment", "true", "pad-4 random crop and horizontal flip"),
    ("seed", "0", ""),
    ("checkpoint_f64", "false", "store checkpoints in 64-bit"),
    ("out_dir", "runs/default", ""),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Synthetic,
    Idx,
    CifarBinary,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "idx" => Ok(Self::Idx),
            "cifar-binary" => Ok(Self::CifarBinary),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Scratch,
    FmSingle,
    FmOneToOne,
    L2twSingle,
    L2twOneToOne,
    L2twwAllToAll,
    AblationMetaWeights,
    AblationTwoStage,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Scratch,
        Mode::FmSingle,
        Mode::FmOneToOne,
        Mode::L2twSingle,
        Mode::L2twOneToOne,
        Mode::L2twwAllToAll,
        Mode::AblationMetaWeights,
        Mode::AblationTwoStage,
    ];

    pub fn uses_sources(self) -> bool {
        self != Mode::Scratch
    }

    pub fn style(self) -> MatchStyle {
        match self {
            Mode::FmSingle | Mode::L2twSingle | Mode::Scratch => MatchStyle::Single,
            Mode::FmOneToOne | Mode::L2twOneToOne => MatchStyle::OneToOne,
            Mode::L2twwAllToAll | Mode::AblationMetaWeights | Mode::AblationTwoStage => MatchStyle::AllToAll,
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            Mode::AblationTwoStage => Scheme::TwoStage,
            _ => Scheme::ThreeStage,
        }
    }

    /// Channel and pair weight sources.
    pub fn weights(self) -> (WeightSource, WeightSource) {
        use WeightSource::*;
        match self {
            Mode::Scratch | Mode::FmSingle | Mode::FmOneToOne => (Uniform, Uniform),
            Mode::L2twSingle | Mode::L2twOneToOne => (MetaNetworks, Uniform),
            Mode::L2twwAllToAll | Mode::AblationTwoStage => (MetaNetworks, MetaNetworks),
            Mode::AblationMetaWeights => (MetaWeights, MetaWeights),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Scratch => "scratch",
            Mode::FmSingle => "fm-single",
            Mode::FmOneToOne => "fm-one-to-one",
            Mode::L2twSingle => "l2tw-single",
            Mode::L2twOneToOne => "l2tw-one-to-one",
            Mode::L2twwAllToAll => "l2tww-all-to-all",
            Mode::AblationMetaWeights => "ablation-metaweights",
            Mode::AblationTwoStage => "ablation-twostage",
        })
    }
}

/// A validated configuration. Values are kept as text in key order and
/// parsed by the typed accessors; [`RunConfig::parse`] runs every accessor
/// once so later calls cannot fail on syntax.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: IndexMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

fn parse_groups(key: &str, v: &str) -> Result<Vec<GroupSpec>> {
    let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: at least one group is required")));
    }
    let n = items.len();
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let (c, b) = item
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("{key}: expected CHANNELSxBLOCKS, got {item:?}")))?;
            Ok(GroupSpec {
                channels: parse_value(key, c)?,
                blocks: parse_value(key, b)?,
                downscale: i + 1 < n,
            })
        })
        .collect()
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: {k} set twice", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Overrides one key; the value is checked by [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        parse_value(key, self.get(key))
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        match self.get(key) {
            "" => Err(Error::Config(format!("{key} is required for task {}", self.get("task")))),
            p => Ok(PathBuf::from(p)),
        }
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _, doc) in KEYS {
            if !doc.is_empty() {
                out.push_str(&format!("# {doc}\n"));
            }
            out.push_str(&format!("{k} = {}\n", self.get(k)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        if task == Task::Synthetic {
            self.synthetic()?.validate()?;
        }
        self.mode()?;
        self.subsample()?;
        self.source_checkpoints();
        parse_groups("source.groups", self.get("source.groups"))?;
        parse_groups("target.groups", self.get("target.groups"))?;
        parse_list("source.hidden", self.get("source.hidden"))?;
        parse_list("target.hidden", self.get("target.hidden"))?;
        self.source_train()?;
        self.plant()?;
        self.meta()?;
        let t = self.train()?;
        t.bilevel.validate()?;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let beta = self.beta()?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        self.typed::<u64>("seed")?;
        self.typed::<usize>("step_budget")?;
        self.typed::<bool>("checkpoint_f64")?;
        self.typed::<usize>("idx.classes")?;
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        self.typed("task")
    }

    pub fn mode(&self) -> Result<Mode> {
        self.typed("mode")
    }

    pub fn seed(&self) -> u64 {
        self.typed("seed").unwrap_or(0)
    }

    pub fn beta(&self) -> Result<f64> {
        self.typed("beta")
    }

    pub fn checkpoint_f64(&self) -> bool {
        self.typed("checkpoint_f64").unwrap_or(false)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec> {
        let planted = match self.get("synthetic.planted_layer") {
            "none" => None,
            v => Some(parse_value("synthetic.planted_layer", v)?),
        };
        let variant: Variant = self.typed("synthetic.variant")?;
        Ok(SyntheticSpec {
            seed: self.typed("synthetic.seed")?,
            size: self.typed("synthetic.size")?,
            families: self.typed("synthetic.families")?,
            subfamilies: self.typed("synthetic.subfamilies")?,
            palettes: self.typed("synthetic.palettes")?,
            source_per_class: self.typed("synthetic.source_per_class")?,
            train_per_class: self.typed("synthetic.train_per_class")?,
            test_per_class: self.typed("synthetic.test_per_class")?,
            noise: self.typed("synthetic.noise")?,
            orientation_jitter: self.typed("synthetic.orientation_jitter")?,
            position_jitter: self.typed("synthetic.position_jitter")?,
            color_jitter: self.typed("synthetic.color_jitter")?,
            planted_layer: planted,
            variant,
        })
    }

    /// Paths of the idx task: train images, train labels, test images, test labels.
    pub fn idx_paths(&self) -> Result<[PathBuf; 4]> {
        Ok([
            self.path("idx.train_images")?,
            self.path("idx.train_labels")?,
            self.path("idx.test_images")?,
            self.path("idx.test_labels")?,
        ])
    }

    pub fn idx_classes(&self) -> usize {
        self.typed("idx.classes").unwrap_or(10)
    }

    pub fn cifar_dir(&self) -> Result<PathBuf> {
        self.path("cifar.dir")
    }

    /// `(per class, seed)` when the training split is subsampled.
    pub fn subsample(&self) -> Result<Option<(usize, u64)>> {
        let n: usize = self.typed("data.train_per_class")?;
        let seed: u64 = self.typed("data.subsample_seed")?;
        Ok((n > 0).then_some((n, seed)))
    }

    pub fn source_checkpoints(&self) -> Vec<PathBuf> {
        self.get("source.checkpoints")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect()
    }

    fn spec(&self, side: &str, input: [usize; 3], classes: usize) -> Result<ExtractorSpec> {
        let spec = ExtractorSpec {
            input,
            groups: parse_groups(&format!("{side}.groups"), self.get(&format!("{side}.groups")))?,
            hidden: parse_list(&format!("{side}.hidden"), self.get(&format!("{side}.hidden")))?,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn source_spec(&self, input: [usize; 3], classes: usize) -> Result<ExtractorSpec> {
        self.spec("source", input, classes)
    }

    pub fn target_spec(&self, input: [usize; 3], classes: usize) -> Result<ExtractorSpec> {
        self.spec("target", input, classes)
    }

    /// Supervised schedule of pretrain-source.
    pub fn source_train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.typed("source.epochs")?,
            batch_size: self.typed("source.batch_size")?,
            lr: self.typed("source.lr")?,
            bilevel: BilevelConfig {
                sgd: self.sgd()?,
                ..BilevelConfig::default()
            },
            augment: self.typed("augment")?,
        })
    }

    /// `(epochs, lr)` of the planting edit.
    pub fn plant(&self) -> Result<(usize, f64)> {
        Ok((self.typed("plant.epochs")?, self.typed("plant.lr")?))
    }

    fn sgd(&self) -> Result<SgdConfig> {
        Ok(SgdConfig {
            momentum: self.typed("momentum")?,
            weight_decay: self.typed("weight_decay")?,
        })
    }

    pub fn meta(&self) -> Result<MetaConfig> {
        let (channel, pair) = self.mode()?.weights();
        Ok(MetaConfig {
            channel,
            pair,
            fixed_lambda: self.typed("fixed_lambda")?,
            lambda_init: self.typed("lambda_init")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let inner_lr = match self.get("inner_lr") {
            "tied" => InnerLr::Tied,
            v => InnerLr::Fixed(parse_value("inner_lr", v)?),
        };
        Ok(TrainConfig {
            epochs: self.typed("epochs")?,
            batch_size: self.typed("batch_size")?,
            lr: self.typed("lr")?,
            bilevel: BilevelConfig {
                inner_steps: self.typed("inner_steps")?,
                inner_lr,
                scheme: self.mode()?.scheme(),
                sgd: self.sgd()?,
                adam: AdamConfig {
                    lr: self.typed("meta_lr")?,
                    weight_decay: self.typed("meta_weight_decay")?,
                    ..AdamConfig::default()
                },
            },
            augment: self.typed("augment")?,
        })
    }

    /// [`RunConfig::train`] for a training split of `n` samples, with the
    /// epoch count derived from `step_budget` when that is set.
    pub fn train_for(&self, n: usize) -> Result<TrainConfig> {
        let mut t = self.train()?;
        let budget: usize = self.typed("step_budget")?;
        if budget > 0 {
            t.epochs = budget.div_ceil(n.div_ceil(t.batch_size).max(1));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_budget_sets_epochs() {
        let mut c = RunConfig::default();
        c.set("batch_size", "32").unwrap();
        assert_eq!(c.train_for(100).unwrap().epochs, 200);
        c.set("step_budget", "400").unwrap();
        assert_eq!(c.train_for(50).unwrap().epochs, 200);
        assert_eq!(c.train_for(100).unwrap().epochs, 100);
        assert_eq!(c.train_for(250).unwrap().epochs, 50);
        assert_eq!(c.train_for(500).unwrap().epochs, 25);
        assert_eq!(c.train_for(0).unwrap().epochs, 400);
    }

    #[test]
    fn defaults_are_valid_and_resolve_to_themselves() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let again = RunConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.train().unwrap().batch_size, 128);
        assert_eq!(cfg.beta().unwrap(), 0.5);
        assert_eq!(cfg.train().unwrap().bilevel.adam.lr, 1e-3);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse("# run\nmode = fm-one-to-one  # baseline\n\nepochs=3\n").unwrap();
        assert_eq!(cfg.mode().unwrap(), Mode::FmOneToOne);
        assert_eq!(cfg.train().unwrap().epochs, 3);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        for text in ["colour = red", "epochs = 1\nepochs = 2", "epochs", "epochs = many", "mode = l2t", "beta = 0", "inner_steps = 0"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn modes_round_trip_and_map_to_settings() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert_eq!(Mode::AblationTwoStage.scheme(), Scheme::TwoStage);
        assert_eq!(Mode::L2twSingle.weights(), (WeightSource::MetaNetworks, WeightSource::Uniform));
        assert_eq!(Mode::AblationMetaWeights.style(), MatchStyle::AllToAll);
    }

    #[test]
    fn group_lists() {
        let g = parse_groups("k", "4x1, 8x2").unwrap();
        assert_eq!(g.len(), 2);
        assert!(g[0].downscale && !g[1].downscale);
        assert_eq!(g[1].blocks, 2);
        assert!(parse_groups("k", "").is_err());
        assert!(parse_groups("k", "4").is_err());
    }
}
