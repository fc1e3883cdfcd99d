use l2tww_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Stats {
    /// Mean and population standard deviation per channel of `[N,C,H,W]`.
    pub fn of(images: &Tensor) -> Self {
        let s = images.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for &v in &images.data()[off..off + hw] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (n * hw) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &q)| {
                *m /= count;
                let var = (q / count - *m * *m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn apply(&self, images: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let s = images.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = images.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (k / hw) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        out
    }

    pub fn standardize(&self, images: &Tensor) -> Tensor {
        self.apply(images, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, images: &Tensor) -> Tensor {
        self.apply(images, |v, m, s| v * s + m)
    }
}

/// Standardized images `[N,C,H,W]` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub stats: Stats,
    pub split: String,
}

impl Dataset {
    /// Builds a dataset from `[0,1]`-scaled images. With `stats = None` the
    /// statistics are computed from these images.
    pub fn from_unit(images: Tensor, labels: Vec<usize>, classes: usize, split: &str, stats: Option<Stats>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::Dataset(format!("images must be non-empty [N,C,H,W], got {s:?}")));
        }
        if labels.len() != s[0] {
            return Err(Error::Dataset(format!("{} labels for {} images", labels.len(), s[0])));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Dataset(format!("label {l} at index {i} is outside [0, {classes})")));
        }
        let stats = stats.unwrap_or_else(|| Stats::of(&images));
        if stats.mean.len() != s[1] {
            return Err(Error::Dataset(format!(
                "{} channel statistics for {} channels",
                stats.mean.len(),
                s[1]
            )));
        }
        Ok(Self {
            images: stats.standardize(&images),
            labels,
            classes,
            stats,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C,H,W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (gather_rows(&self.images, idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// A new dataset with the given sample indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let (images, labels) = self.gather(idx);
        Self {
            images,
            labels,
            classes: self.classes,
            stats: self.stats.clone(),
            split: self.split.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Rows `idx` of a tensor along its first axis.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let s = t.shape();
    let row = t.len() / s[0];
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("consistent length")
}

/// Exactly `n` samples per class. Each class is shuffled once with `seed` and
/// its first `n` members are taken, so smaller draws are subsets of larger ones.
pub fn subsample_per_class(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let mut by_class = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n * ds.classes);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < n {
            return Err(Error::ClassDeficit {
                class,
                available: members.len(),
                requested: n,
            });
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..n]);
    }
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}

/// A shuffled partition of `0..n` into batches of at most `batch_size`.
pub fn batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Zero-padding by 4, a random crop back to the original size, and a random
/// horizontal flip, independently per image.
pub fn augment(x: &Tensor, rng: &mut impl Rng) -> Tensor {
    const PAD: usize = 4;
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    for i in 0..b {
        let dy = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for r in 0..h {
                let sr = r as isize + dy;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for col in 0..w {
                    let oc = if flip { w - 1 - col } else { col };
                    let sc = col as isize + dx;
                    if sc < 0 || sc >= w as isize {
                        continue;
                    }
                    out.data_mut()[base + r * w + oc] = x.data()[base + sr as usize * w + sc as usize];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn toy(n_per: usize, classes: usize) -> Dataset {
        let n = n_per * classes;
        let images = Tensor::from_fn(&[n, 2, 2, 2], |i| (i % 17) as f64 / 16.0);
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::from_unit(images, labels, classes, "train", None).unwrap()
    }

    #[test]
    fn standardization_round_trips() {
        let raw = Tensor::from_fn(&[5, 3, 2, 2], |i| ((i * 31) % 19) as f64 / 18.0);
        let ds = Dataset::from_unit(raw.clone(), vec![0; 5], 1, "train", None).unwrap();
        let back = ds.stats.destandardize(&ds.images);
        for (a, b) in back.data().iter().zip(raw.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let restats = Stats::of(&ds.images);
        assert!(restats.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(restats.std.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn invalid_labels_rejected() {
        let images = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(Dataset::from_unit(images.clone(), vec![0, 3], 3, "t", None).is_err());
        assert!(Dataset::from_unit(images, vec![0], 3, "t", None).is_err());
    }

    #[test]
    fn full_subsample_is_permutation() {
        let ds = toy(4, 3);
        let sub = subsample_per_class(&ds, 4, 9).unwrap();
        assert_eq!(sub.len(), ds.len());
        let mut a = sub.labels.clone();
        let mut b = ds.labels.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn one_per_class() {
        let ds = toy(5, 10);
        let sub = subsample_per_class(&ds, 1, 0).unwrap();
        assert_eq!(sub.len(), 10);
        assert_eq!(sub.class_counts(), vec![1; 10]);
    }

    #[test]
    fn deficit_names_class() {
        let mut ds = toy(3, 2);
        ds.labels[1] = 0; // class 1 now has 2 samples
        match subsample_per_class(&ds, 3, 0) {
            Err(Error::ClassDeficit { class: 1, available: 2, requested: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn draws_are_nested() {
        // identify samples by their (distinct) pixel content
        let n = 200;
        let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f64 / n as f64);
        let ds = Dataset::from_unit(images, (0..n).map(|i| i % 2).collect(), 2, "train", None).unwrap();
        let key = |d: &Dataset| d.images.data().iter().map(|v| v.to_bits()).collect::<HashSet<_>>();
        let small = key(&subsample_per_class(&ds, 50, 4).unwrap());
        let large = key(&subsample_per_class(&ds, 100, 4).unwrap());
        assert!(small.is_subset(&large));
        assert_eq!(small.len(), 100);
    }

    #[test]
    fn augment_keeps_shape_and_is_seeded() {
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| i as f64);
        let a = augment(&x, &mut ChaCha8Rng::seed_from_u64(1));
        let b = augment(&x, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn batches_partition_indices(n in 1usize..300, bs in 1usize..64, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bat = batches(n, bs, &mut rng);
            let mut all: Vec<usize> = bat.iter().flatten().copied().collect();
            prop_assert!(bat.iter().all(|b| !b.is_empty() && b.len() <= bs));
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
