//! Candidate (source layer, target layer) pairs.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A candidate pair: source network `source`, source tap `g{m}`, target tap
/// `g{n}` (both 1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub source: usize,
    pub m: usize,
    pub n: usize,
}

impl Pair {
    pub fn new(source: usize, m: usize, n: usize) -> Self {
        Self { source, m, n }
    }

    /// Stable identifier used in parameter names and CSV columns.
    pub fn key(&self) -> String {
        format!("s{}_m{}_n{}", self.source, self.m, self.n)
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for Pair {
    type Err = Error;

    /// Parses `s{src}_m{m}_n{n}`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownPair(format!("{s:?} (expected s<src>_m<m>_n<n>)"));
        let mut parts = s.split('_');
        let mut field = |tag: char| -> Result<usize> {
            let p = parts.next().ok_or_else(bad)?;
            p.strip_prefix(tag).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let pair = Pair::new(field('s')?, field('m')?, field('n')?);
        if parts.next().is_some() || pair.m == 0 || pair.n == 0 {
            return Err(bad());
        }
        Ok(pair)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchStyle {
    /// Last source tap with one target tap.
    Single,
    /// Every source tap with the target tap of the same spatial size.
    OneToOne,
    /// Full cross product of source and target taps.
    AllToAll,
}

impl FromStr for MatchStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "one-to-one" => Ok(Self::OneToOne),
            "all-to-all" => Ok(Self::AllToAll),
            other => Err(Error::Config(format!(
                "unknown match style {other:?} (single, one-to-one, all-to-all)"
            ))),
        }
    }
}

impl fmt::Display for MatchStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::OneToOne => "one-to-one",
            Self::AllToAll => "all-to-all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub pairs: Vec<Pair>,
    pub style: MatchStyle,
    pub beta: f64,
}

/// The target tap whose spatial size is closest to `hw`; ties go to the
/// larger target, then to the deeper tap.
fn nearest_target(hw: [usize; 2], target: &[[usize; 3]]) -> usize {
    let area = (hw[0] * hw[1]) as i64;
    let mut best = 0;
    for (i, t) in target.iter().enumerate() {
        let (a, b) = (t[1] * t[2], target[best][1] * target[best][2]);
        let (da, db) = ((a as i64 - area).abs(), (b as i64 - area).abs());
        if da < db || (da == db && a >= b) {
            best = i;
        }
    }
    best
}

/// Builds the candidate set for one source network. Tap shapes are `[C,H,W]`.
pub fn make_config(
    style: MatchStyle,
    source: usize,
    source_taps: &[[usize; 3]],
    target_taps: &[[usize; 3]],
    beta: f64,
) -> Result<MatchConfig> {
    if source_taps.is_empty() || target_taps.is_empty() {
        return Err(Error::Spec(format!(
            "cannot match {} source taps with {} target taps",
            source_taps.len(),
            target_taps.len()
        )));
    }
    let pairs = match style {
        MatchStyle::Single => {
            let m = source_taps.len() - 1;
            let s = source_taps[m];
            let n = target_taps
                .iter()
                .rposition(|t| t[1..] == s[1..])
                .unwrap_or(target_taps.len() - 1);
            vec![Pair::new(source, m + 1, n + 1)]
        }
        MatchStyle::OneToOne => source_taps
            .iter()
            .enumerate()
            .map(|(m, s)| Pair::new(source, m + 1, nearest_target([s[1], s[2]], target_taps) + 1))
            .collect(),
        MatchStyle::AllToAll => (1..=source_taps.len())
            .flat_map(|m| (1..=target_taps.len()).map(move |n| Pair::new(source, m, n)))
            .collect(),
    };
    let cfg = MatchConfig { pairs, style, beta };
    cfg.validate()?;
    Ok(cfg)
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be a non-negative number, got {}", self.beta)));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if self.pairs[..i].contains(p) {
                return Err(Error::Config(format!("duplicate pair {p}")));
            }
        }
        Ok(())
    }

    /// Concatenates per-source candidate sets.
    pub fn union(configs: Vec<MatchConfig>) -> Result<MatchConfig> {
        let mut it = configs.into_iter();
        let mut out = it
            .next()
            .ok_or_else(|| Error::Config("no candidate sets to unite".into()))?;
        for c in it {
            out.pairs.extend(c.pairs);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn position(&self, pair: &Pair) -> Result<usize> {
        self.pairs
            .iter()
            .position(|p| p == pair)
            .ok_or_else(|| Error::UnknownPair(pair.key()))
    }
}
