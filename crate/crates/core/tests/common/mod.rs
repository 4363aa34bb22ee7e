#![allow(dead_code)]

pub mod checks;
pub mod inference;

use std::path::Path;

use ndarray::{Array1, Array2};
use openintent::cli::RunConfig;
use openintent::losses::ContrastiveSample;
use openintent::synthetic::{self, SyntheticConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| Distribution::<f64>::sample(&StandardNormal, rng))
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut z = gaussian(rows, cols, rng);
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    z
}

pub fn unit_vector(cols: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    unit_rows(1, cols, rng).row(0).to_owned()
}

/// `n` tuples over disjoint rows: anchor, `k` positives, `m` negatives.
/// Returns the samples and the total row count.
pub fn disjoint_samples(n: usize, k: usize, m: usize) -> (Vec<ContrastiveSample>, usize) {
    let width = 1 + k + m;
    let samples = (0..n)
        .map(|i| {
            let base = i * width;
            ContrastiveSample {
                anchor: base,
                positives: (base + 1..base + 1 + k).collect(),
                negatives: (base + 1 + k..base + width).collect(),
            }
        })
        .collect();
    (samples, n * width)
}

/// `||a - n|| / max(||a||, ||n||)`, or the absolute gap when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &mut [f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(x);
        x[i] = orig - eps;
        let minus = f(x);
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    grad
}

pub fn random_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Writes the default synthetic corpus (8 known + 4 open clusters, 200
/// instances per class) into `dir`.
pub fn write_synthetic(dir: &Path) {
    let corpus = synthetic::generate(&SyntheticConfig::default()).expect("synthetic corpus");
    corpus.write(dir).expect("write corpus");
}

/// Hyperparameters used for synthetic-set experiments.
pub fn synthetic_run(dataset: &Path, output: &Path) -> RunConfig {
    let mut config = RunConfig {
        dataset_dir: dataset.to_path_buf(),
        output_dir: output.to_path_buf(),
        ..RunConfig::default()
    };
    config.stage2.e = 0.95;
    config
}
