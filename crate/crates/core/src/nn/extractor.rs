//! Plain convolutional feature extractors with one named tap per group.
//!
//! A group is `blocks` × (3×3 conv, bias, ReLU), optionally followed by 2×2
//! average pooling. The tap `g{k}` is the last feature map of group `k`, i.e.
//! the map just before its downscaling. The classifier head global-average
//! pools the final feature map and applies dense layers.

use l2tww_autodiff::{ConvGeom, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};

const CONV3: ConvGeom = ConvGeom { stride: 1, padding: 1 };

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub channels: usize,
    pub blocks: usize,
    pub downscale: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorSpec {
    /// `[C, H, W]`
    pub input: [usize; 3],
    pub groups: Vec<GroupSpec>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ExtractorSpec {
    /// Groups with the given channel counts, `blocks` convs each, downscaling
    /// after every group except the last.
    pub fn uniform(input: [usize; 3], channels: &[usize], blocks: usize, classes: usize) -> Self {
        let groups = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| GroupSpec {
                channels: c,
                blocks,
                downscale: i + 1 < channels.len(),
            })
            .collect();
        Self {
            input,
            groups,
            hidden: Vec::new(),
            classes,
        }
    }

    /// Desk-scale source network: 16/32/64 channels, two blocks per group.
    pub fn desk_source(input: [usize; 3], classes: usize) -> Self {
        Self::uniform(input, &[16, 32, 64], 2, classes)
    }

    /// Desk-scale target network: 8/16/32 channels, one block per group.
    pub fn desk_target(input: [usize; 3], classes: usize) -> Self {
        Self::uniform(input, &[8, 16, 32], 1, classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Spec("at least one group is required".into()));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("zero-sized input {:?}", self.input)));
        }
        if self.classes == 0 {
            return Err(Error::Spec("zero classes".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.channels == 0 {
                return Err(Error::Spec(format!("group g{} has zero channels", i + 1)));
            }
            if g.blocks == 0 {
                return Err(Error::Spec(format!("group g{} has zero blocks", i + 1)));
            }
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Spec("zero-width hidden layer".into()));
        }
        let mut hw = (self.input[1], self.input[2]);
        for (i, g) in self.groups.iter().enumerate() {
            if g.downscale {
                if hw.0 < 2 || hw.1 < 2 {
                    return Err(Error::Spec(format!("group g{} cannot downscale {hw:?}", i + 1)));
                }
                hw = (hw.0 / 2, hw.1 / 2);
            }
        }
        Ok(())
    }

    pub fn tap_names(&self) -> Vec<String> {
        (1..=self.groups.len()).map(|k| format!("g{k}")).collect()
    }

    /// `[C, H, W]` of every tap.
    pub fn tap_shapes(&self) -> Vec<[usize; 3]> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let mut out = Vec::new();
        for g in &self.groups {
            out.push([g.channels, h, w]);
            if g.downscale {
                h /= 2;
                w /= 2;
            }
        }
        out
    }

    /// Flat numeric encoding, stored alongside parameters in checkpoints.
    pub fn to_scalars(&self, prefix: &str) -> Vec<(String, f64)> {
        let mut out = vec![
            (format!("{prefix}input.c"), self.input[0] as f64),
            (format!("{prefix}input.h"), self.input[1] as f64),
            (format!("{prefix}input.w"), self.input[2] as f64),
            (format!("{prefix}groups"), self.groups.len() as f64),
            (format!("{prefix}hidden"), self.hidden.len() as f64),
            (format!("{prefix}classes"), self.classes as f64),
        ];
        for (i, g) in self.groups.iter().enumerate() {
            out.push((format!("{prefix}g{i}.channels"), g.channels as f64));
            out.push((format!("{prefix}g{i}.blocks"), g.blocks as f64));
            out.push((format!("{prefix}g{i}.downscale"), g.downscale as u8 as f64));
        }
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("{prefix}h{i}"), h as f64));
        }
        out
    }

    /// Inverse of [`Self::to_scalars`]; `get` looks up one scalar.
    pub fn from_scalars(prefix: &str, get: impl Fn(&str) -> Result<f64>) -> Result<Self> {
        let u = |k: String| -> Result<usize> {
            let v = get(&k)?;
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Spec(format!("{k} = {v} is not a count")))
            }
        };
        let groups = (0..u(format!("{prefix}groups"))?)
            .map(|i| {
                Ok(GroupSpec {
                    channels: u(format!("{prefix}g{i}.channels"))?,
                    blocks: u(format!("{prefix}g{i}.blocks"))?,
                    downscale: u(format!("{prefix}g{i}.downscale"))? != 0,
                })
            })
            .collect::<Result<_>>()?;
        let hidden = (0..u(format!("{prefix}hidden"))?)
            .map(|i| u(format!("{prefix}h{i}")))
            .collect::<Result<_>>()?;
        let spec = Self {
            input: [
                u(format!("{prefix}input.c"))?,
                u(format!("{prefix}input.h"))?,
                u(format!("{prefix}input.w"))?,
            ],
            groups,
            hidden,
            classes: u(format!("{prefix}classes"))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.input[0];
        for g in &self.groups {
            for _ in 0..g.blocks {
                total += c_in * g.channels * 9 + g.channels;
                c_in = g.channels;
            }
        }
        for &h in &self.hidden {
            total += c_in * h + h;
            c_in = h;
        }
        total + c_in * self.classes + self.classes
    }
}

/// Output of a forward pass: one feature map per tap and the logits.
pub struct Features {
    pub taps: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub spec: ExtractorSpec,
    /// Name prefix of every parameter, e.g. `"t."`.
    pub prefix: String,
    pub params: ParamSet,
    pub frozen: bool,
}

impl FeatureExtractor {
    /// He-initialized weights (normal, std `sqrt(2 / fan_in)`), zero biases.
    pub fn build(spec: ExtractorSpec, prefix: &str, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut he = |shape: &[usize], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(&mut rng))
        };
        let mut c_in = spec.input[0];
        for (gi, g) in spec.groups.iter().enumerate() {
            for bi in 0..g.blocks {
                let name = Self::conv_name(prefix, gi, bi);
                params.insert(format!("{name}.w"), he(&[g.channels, c_in, 3, 3], c_in * 9));
                params.insert(format!("{name}.b"), Tensor::zeros(&[g.channels]));
                c_in = g.channels;
            }
        }
        for (hi, &h) in spec.hidden.iter().enumerate() {
            params.insert(format!("{prefix}head.h{hi}.w"), he(&[c_in, h], c_in));
            params.insert(format!("{prefix}head.h{hi}.b"), Tensor::zeros(&[h]));
            c_in = h;
        }
        params.insert(format!("{prefix}head.out.w"), he(&[c_in, spec.classes], c_in));
        params.insert(format!("{prefix}head.out.b"), Tensor::zeros(&[spec.classes]));
        Ok(Self {
            spec,
            prefix: prefix.to_string(),
            params,
            frozen: false,
        })
    }

    pub fn conv_name(prefix: &str, group: usize, block: usize) -> String {
        format!("{prefix}g{}.b{}", group + 1, block + 1)
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(Error::Spec(format!(
                "input shape {:?} does not match [B, {}, {}, {}]",
                shape, self.spec.input[0], self.spec.input[1], self.spec.input[2]
            )));
        }
        Ok(())
    }

    /// Forward pass reading parameters from `params` (which may hold more
    /// entries than this extractor owns).
    pub fn forward(&self, params: &Bound, x: &Var) -> Result<Features> {
        let taps = self.forward_taps(params, x, self.spec.groups.len())?;
        let last = taps.last().expect("at least one group");
        let h = match self.spec.groups.last() {
            Some(g) if g.downscale => last.avg_pool2()?,
            _ => last.clone(),
        };
        let mut z = h.global_avg_pool()?;
        for hi in 0..self.spec.hidden.len() {
            z = z
                .matmul(params.get(&format!("{}head.h{hi}.w", self.prefix))?)?
                .add_row(params.get(&format!("{}head.h{hi}.b", self.prefix))?)?
                .relu();
        }
        let logits = z
            .matmul(params.get(&format!("{}head.out.w", self.prefix))?)?
            .add_row(params.get(&format!("{}head.out.b", self.prefix))?)?;
        Ok(Features { taps, logits })
    }

    /// The taps of the first `groups` groups only; parameters of later groups
    /// and of the head are not read.
    pub fn forward_taps(&self, params: &Bound, x: &Var, groups: usize) -> Result<Vec<Var>> {
        self.check_input(&x.shape())?;
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(groups);
        for (gi, g) in self.spec.groups.iter().enumerate().take(groups) {
            if gi > 0 && self.spec.groups[gi - 1].downscale {
                h = h.avg_pool2()?;
            }
            for bi in 0..g.blocks {
                let name = Self::conv_name(&self.prefix, gi, bi);
                h = h
                    .conv2d(params.get(&format!("{name}.w"))?, CONV3)?
                    .add_channel(params.get(&format!("{name}.b"))?)?
                    .relu();
            }
            taps.push(h.clone());
        }
        Ok(taps)
    }

    /// Forward pass on constants: tap tensors and logits.
    pub fn forward_features(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let graph = Graph::new();
        let bound = self.params.bind(&graph, false);
        let f = self.forward(&bound, &graph.constant(x.clone()))?;
        Ok((
            f.taps.iter().map(|t| (*t.value()).clone()).collect(),
            (*f.logits.value()).clone(),
        ))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_features(x)?.1)
    }
}
