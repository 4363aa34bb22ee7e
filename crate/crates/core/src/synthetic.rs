//! Synthetic intent corpus.
//!
//! Each class is a Gaussian cluster on the unit sphere of a small latent
//! space. An instance draws a latent point `x = normalize(mu + spread * g)`
//! with `g ~ N(0, I / D)`, where `mu` is one of `modes` sub-centers of the
//! class (`normalize(center + mode_spread * g')`), then samples tokens i.i.d. from
//! `p(v) ∝ exp(concentration * x . u_v)` where `u_v` is a fixed random unit
//! vector per vocabulary token. Open clusters are written to the test split
//! only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub known_classes: usize,
    pub open_classes: usize,
    pub per_class: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub spread: f64,
    pub modes: usize,
    pub mode_spread: f64,
    pub concentration: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            known_classes: 8,
            open_classes: 4,
            per_class: 200,
            latent_dim: 16,
            vocab_size: 300,
            spread: 0.5,
            modes: 1,
            mode_spread: 0.0,
            concentration: 15.0,
            min_len: 6,
            max_len: 14,
            train_fraction: 0.6,
            valid_fraction: 0.1,
            seed: 2024,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.known_classes < 2 {
            return fail("need at least 2 known classes");
        }
        if self.per_class < 3 || self.latent_dim == 0 || self.vocab_size == 0 {
            return fail("per_class >= 3, latent_dim >= 1 and vocab_size >= 1 required");
        }
        if self.modes == 0 || self.mode_spread < 0.0 {
            return fail("need modes >= 1 and mode_spread >= 0");
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return fail("need 1 <= min_len <= max_len");
        }
        let (t, v) = (self.train_fraction, self.valid_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v < 1.0) {
            return fail("need train_fraction > 0, valid_fraction >= 0, sum < 1");
        }
        Ok(())
    }

    fn split_sizes(&self) -> (usize, usize) {
        let n = self.per_class as f64;
        let train = ((n * self.train_fraction).round() as usize).max(1);
        let valid = (n * self.valid_fraction).round() as usize;
        (train, valid.min(self.per_class - train - 1))
    }
}

pub fn class_name(g: usize) -> String {
    format!("intent_{g:02}")
}

/// Lines of each split as `(text, label)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SyntheticCorpus {
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> &[(String, String)] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in [Split::Train, Split::Valid, Split::Test] {
            let mut body = String::new();
            for (text, label) in self.split(split) {
                let _ = writeln!(body, "{text}\t{label}");
            }
            let path = dir.join(split.file_name());
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, "synthetic");
    let dim = config.latent_dim;
    let mut token_dirs = Array2::zeros((config.vocab_size, dim));
    for mut row in token_dirs.rows_mut() {
        row.assign(&unit_gaussian(dim, &mut rng));
    }
    let total = config.known_classes + config.open_classes;
    let centers: Vec<Array1<f64>> = (0..total).map(|_| unit_gaussian(dim, &mut rng)).collect();
    let (n_train, n_valid) = config.split_sizes();
    let noise_scale = config.spread / (dim as f64).sqrt();
    let mode_scale = config.mode_spread / (dim as f64).sqrt();
    let perturb = |v: &Array1<f64>, scale: f64, rng: &mut rng::Rng| -> Array1<f64> {
        let noise: Array1<f64> =
            Array1::from_shape_fn(dim, |_| scale * Distribution::<f64>::sample(&StandardNormal, rng));
        let x = v + &noise;
        &x / x.dot(&x).sqrt()
    };

    let mut corpus = SyntheticCorpus::default();
    for (g, center) in centers.iter().enumerate() {
        let label = class_name(g);
        let modes: Vec<Array1<f64>> = (0..config.modes).map(|_| perturb(center, mode_scale, &mut rng)).collect();
        let mut texts: Vec<String> = (0..config.per_class)
            .map(|i| {
                let x = perturb(&modes[i % modes.len()], noise_scale, &mut rng);
                let logits = token_dirs.dot(&x) * config.concentration;
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let dist = WeightedIndex::new(&weights).expect("positive weights");
                let len = rng.random_range(config.min_len..=config.max_len);
                (0..len)
                    .map(|_| format!("t{:03}", dist.sample(&mut rng)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        texts.shuffle(&mut rng);
        let mut rest = texts.into_iter();
        let lines = |it: &mut dyn Iterator<Item = String>, n: usize| -> Vec<(String, String)> {
            it.take(n).map(|t| (t, label.clone())).collect()
        };
        if g < config.known_classes {
            corpus.train.extend(lines(&mut rest, n_train));
            corpus.valid.extend(lines(&mut rest, n_valid));
        } else {
            rest.by_ref().take(n_train + n_valid).for_each(drop);
        }
        corpus.test.extend(rest.map(|t| (t, label.clone())));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn shapes_and_open_classes() {
        let cfg = SyntheticConfig { per_class: 20, ..SyntheticConfig::default() };
        let c = generate(&cfg).unwrap();
        assert_eq!(c.train.len(), 8 * 12);
        assert_eq!(c.valid.len(), 8 * 2);
        assert_eq!(c.test.len(), 12 * 6);
        let train_labels: BTreeSet<_> = c.train.iter().map(|(_, l)| l.clone()).collect();
        let test_labels: BTreeSet<_> = c.test.iter().map(|(_, l)| l.clone()).collect();
        assert_eq!(train_labels.len(), 8);
        assert_eq!(test_labels.len(), 12);
        assert!(!train_labels.contains(&class_name(8)));
        for (text, _) in &c.train {
            let n = text.split(' ').count();
            assert!((6..=14).contains(&n));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig { per_class: 10, ..SyntheticConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SyntheticConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }
}
