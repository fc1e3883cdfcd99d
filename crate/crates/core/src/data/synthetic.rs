//! Procedural Gabor-patch images.
//!
//! Every image is a Gabor patch with orientation family `f` and frequency
//! sub-family `k`. Source labels are the family (coarse); target labels are
//! `f·subfamilies + k` (fine). Nuisance factors are phase, position, a
//! discrete colour palette with jitter, and pixel noise. In the
//! two-population variant half of the images carry a visible colour tint.

use std::f64::consts::PI;

use l2tww_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Stats};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Standard,
    TwoPopulation,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "two-population" => Ok(Self::TwoPopulation),
            other => Err(Error::Config(format!(
                "unknown synthetic variant {other:?} (standard, two-population)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::TwoPopulation => "two-population",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub size: usize,
    pub families: usize,
    pub subfamilies: usize,
    pub palettes: usize,
    /// Per fine class.
    pub source_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    /// Radians.
    pub orientation_jitter: f64,
    /// Pixels.
    pub position_jitter: f64,
    pub color_jitter: f64,
    /// Tap of the source made label-aligned when planting (1-based).
    pub planted_layer: Option<usize>,
    pub variant: Variant,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 16,
            families: 5,
            subfamilies: 2,
            palettes: 4,
            source_per_class: 200,
            train_per_class: 25,
            test_per_class: 50,
            noise: 0.25,
            orientation_jitter: 0.15,
            position_jitter: 3.0,
            color_jitter: 0.15,
            planted_layer: Some(1),
            variant: Variant::Standard,
        }
    }
}

impl SyntheticSpec {
    pub fn fine_classes(&self) -> usize {
        self.families * self.subfamilies
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || self.families == 0 || self.subfamilies == 0 || self.palettes == 0 {
            return Err(Error::Config(
                "synthetic size must be at least 4 and class/palette counts positive".into(),
            ));
        }
        if self.source_per_class == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("synthetic per-class counts must be positive".into()));
        }
        if self.planted_layer == Some(0) {
            return Err(Error::Config("planted layer is 1-based".into()));
        }
        Ok(())
    }

    /// Wavelength in pixels of sub-family `k`.
    fn wavelength(&self, k: usize) -> f64 {
        let (lo, hi) = (2.5, 0.4 * self.size as f64);
        if self.subfamilies == 1 {
            return 0.5 * (lo + hi);
        }
        lo * (hi / lo).powf(k as f64 / (self.subfamilies - 1) as f64)
    }
}

/// Ground-truth factors of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Factors {
    pub fine: usize,
    pub coarse: usize,
    pub palette: usize,
    pub population: usize,
}

/// A split with its factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub data: Dataset,
    pub factors: Vec<Factors>,
}

impl Split {
    pub fn fine(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.fine).collect()
    }

    pub fn palettes(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.palette).collect()
    }

    pub fn populations(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.population).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    /// Labelled by family.
    pub source: Split,
    pub target_train: Split,
    pub target_test: Split,
}

fn palette_colors(palettes: usize) -> Vec<[f64; 3]> {
    (0..palettes)
        .map(|p| {
            let hue = 2.0 * PI * p as f64 / palettes as f64;
            [0, 1, 2].map(|c| 0.6 + 0.4 * (hue + 2.0 * PI * c as f64 / 3.0).cos())
        })
        .collect()
}

fn render(spec: &SyntheticSpec, n_per: usize, stream: u64) -> (Vec<f64>, Vec<Factors>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let colors = palette_colors(spec.palettes);
    let s = spec.size;
    let centre = (s as f64 - 1.0) / 2.0;
    let envelope = s as f64 / 4.0;
    let mut pixels = Vec::with_capacity(spec.fine_classes() * n_per * 3 * s * s);
    let mut factors = Vec::new();
    for i in 0..n_per {
        for fine in 0..spec.fine_classes() {
            let (f, k) = (fine / spec.subfamilies, fine % spec.subfamilies);
            let palette = rng.gen_range(0..spec.palettes);
            let population = match spec.variant {
                Variant::Standard => 0,
                Variant::TwoPopulation => (i + fine) % 2,
            };
            let theta = PI * f as f64 / spec.families as f64 + spec.orientation_jitter * normal.sample(&mut rng);
            let lambda = spec.wavelength(k);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let cx = centre + rng.gen_range(-spec.position_jitter..=spec.position_jitter);
            let cy = centre + rng.gen_range(-spec.position_jitter..=spec.position_jitter);
            let gain = colors[palette].map(|c| c + spec.color_jitter * normal.sample(&mut rng));
            let tint = if population == 1 { [-0.15, 0.0, 0.15] } else { [0.0; 3] };
            let (sin, cos) = theta.sin_cos();
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        let along = dx * cos + dy * sin;
                        let env = (-(dx * dx + dy * dy) / (2.0 * envelope * envelope)).exp();
                        let g = env * (2.0 * PI * along / lambda + phase).cos();
                        let v = 0.5 + tint[c] + 0.4 * gain[c] * g + spec.noise * normal.sample(&mut rng);
                        pixels.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            factors.push(Factors {
                fine,
                coarse: f,
                palette,
                population,
            });
        }
    }
    (pixels, factors)
}

/// Generates the source split (family labels) and the target train/test
/// splits (fine labels). All splits share the source split's standardization.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let s = spec.size;
    let build = |n_per: usize, stream: u64| -> Result<(Tensor, Vec<Factors>)> {
        let (pixels, factors) = render(spec, n_per, stream);
        Ok((Tensor::new(&[factors.len(), 3, s, s], pixels)?, factors))
    };
    let (xs, fs) = build(spec.source_per_class, 1)?;
    let stats = Stats::of(&xs);
    let source = Dataset::from_unit(xs, fs.iter().map(|f| f.coarse).collect(), spec.families, "source", Some(stats.clone()))?;
    let target = |n_per, stream, split: &str| -> Result<Split> {
        let (x, f) = build(n_per, stream)?;
        let labels = f.iter().map(|f| f.fine).collect();
        Ok(Split {
            data: Dataset::from_unit(x, labels, spec.fine_classes(), split, Some(stats.clone()))?,
            factors: f,
        })
    };
    Ok(SyntheticTask {
        spec: spec.clone(),
        source: Split { data: source, factors: fs },
        target_train: target(spec.train_per_class, 2, "train")?,
        target_test: target(spec.test_per_class, 3, "test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            source_per_class: 3,
            train_per_class: 2,
            test_per_class: 1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.target_train.data.images, c.target_train.data.images);
    }

    #[test]
    fn class_counts_match_spec() {
        let t = gen_synthetic(&small()).unwrap();
        assert_eq!(t.source.data.classes, 5);
        assert_eq!(t.source.data.class_counts(), vec![6; 5]);
        assert_eq!(t.target_train.data.classes, 10);
        assert_eq!(t.target_train.data.class_counts(), vec![2; 10]);
        assert_eq!(t.target_test.data.class_counts(), vec![1; 10]);
        assert_eq!(t.target_train.data.images.shape(), &[20, 3, 16, 16]);
    }

    #[test]
    fn coarse_label_is_family_of_fine() {
        let t = gen_synthetic(&small()).unwrap();
        for f in &t.source.factors {
            assert_eq!(f.coarse, f.fine / 2);
        }
    }

    #[test]
    fn populations_balanced_only_in_two_population_variant() {
        let std = gen_synthetic(&small()).unwrap();
        assert!(std.target_train.populations().iter().all(|&p| p == 0));
        let two = gen_synthetic(&SyntheticSpec {
            variant: Variant::TwoPopulation,
            ..small()
        })
        .unwrap();
        let ones = two.target_train.populations().iter().filter(|&&p| p == 1).count();
        assert_eq!(ones, 10);
    }

    #[test]
    fn wavelengths_span_range() {
        let s = SyntheticSpec::default();
        assert_eq!(s.wavelength(0), 2.5);
        assert!((s.wavelength(1) - 6.4).abs() < 1e-12);
    }
}
