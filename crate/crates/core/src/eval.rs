//! Open-set inference and metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Known class id, or `num_known` for open.
    pub label: usize,
    pub distances: Vec<f64>,
}

/// Open when `z` lies outside every boundary scaled by `ratio`; otherwise the
/// nearest center over all known classes.
pub fn predict(boundary: &BoundaryModel, z: ArrayView1<f64>, ratio: f64) -> Prediction {
    let distances: Vec<f64> = (0..boundary.num_known())
        .map(|k| boundary.distance(z, k))
        .collect();
    let outside_all = distances
        .iter()
        .zip(&boundary.radii)
        .all(|(&d, &r)| d > ratio * r);
    let label = if outside_all {
        boundary.num_known()
    } else {
        argmin(&distances)
    };
    Prediction { label, distances }
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict_all(boundary: &BoundaryModel, z: &Array2<f64>, ratio: f64) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|row| predict(boundary, row, ratio).label)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1_all: f64,
    pub macro_f1_known: f64,
    pub f1_unknown: f64,
    pub num_instances: usize,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true labels, columns predictions; the last index is open.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics over `num_known + 1` classes from label pairs. `names` supplies the
/// known class names; the open class is reported as `"<open>"`.
pub fn report_from_predictions(
    predicted: &[usize],
    truth: &[usize],
    num_known: usize,
    names: &[String],
) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if predicted.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let n = num_known + 1;
    let mut confusion = vec![vec![0usize; n]; n];
    for (&p, &t) in predicted.iter().zip(truth) {
        if t >= n || p >= n {
            return Err(Error::LabelOutOfRange { label: t.max(p), classes: n });
        }
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted_c);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label: names.get(c).cloned().unwrap_or_else(|| "<open>".to_string()),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let correct: usize = (0..n).map(|c| confusion[c][c]).sum();
    let known_sum: f64 = per_class[..num_known].iter().map(|m| m.f1).sum();
    let f1_unknown = per_class[num_known].f1;
    Ok(EvalReport {
        accuracy: ratio(correct, truth.len()),
        macro_f1_all: (known_sum + f1_unknown) / n as f64,
        macro_f1_known: if num_known == 0 { 0.0 } else { known_sum / num_known as f64 },
        f1_unknown,
        num_instances: truth.len(),
        per_class,
        confusion,
    })
}

/// Report for test embeddings against true labels (open = `num_known`).
pub fn evaluate(boundary: &BoundaryModel, z: &Array2<f64>, truth: &[usize]) -> Result<EvalReport> {
    evaluate_with_ratio(boundary, z, truth, 1.0)
}

pub fn evaluate_with_ratio(
    boundary: &BoundaryModel,
    z: &Array2<f64>,
    truth: &[usize],
    ratio: f64,
) -> Result<EvalReport> {
    if z.nrows() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings for {} labels",
            z.nrows(),
            truth.len()
        )));
    }
    let predicted = predict_all(boundary, z, ratio);
    report_from_predictions(&predicted, truth, boundary.num_known(), &boundary.labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub accuracy: f64,
    pub macro_f1_all: f64,
}

/// 0.80, 0.85, ..., 1.20.
pub fn default_ratios() -> Vec<f64> {
    (0..=8).map(|i| (80 + 5 * i) as f64 / 100.0).collect()
}

pub fn boundary_sweep(
    boundary: &BoundaryModel,
    z: &Array2<f64>,
    truth: &[usize],
    ratios: &[f64],
) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&r| {
            let report = evaluate_with_ratio(boundary, z, truth, r)?;
            Ok(SweepRow {
                ratio: r,
                accuracy: report.accuracy,
                macro_f1_all: report.macro_f1_all,
            })
        })
        .collect()
}

/// Ratio with the highest macro F1; the first one wins ties.
pub fn best_ratio(rows: &[SweepRow]) -> Option<f64> {
    let mut best: Option<&SweepRow> = None;
    for row in rows {
        if best.is_none_or(|b| row.macro_f1_all > b.macro_f1_all) {
            best = Some(row);
        }
    }
    best.map(|r| r.ratio)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,accuracy,macro_f1_all\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.ratio, r.accuracy, r.macro_f1_all);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRow {
    pub instance_id: usize,
    pub true_label: usize,
    pub assigned_center: usize,
    pub distance: f64,
    pub radius: f64,
    pub is_open_truth: bool,
}

/// Distance of each instance to its nearest center, unclipped.
pub fn distance_table(
    boundary: &BoundaryModel,
    z: &Array2<f64>,
    truth: &[usize],
    instance_ids: &[usize],
) -> Result<Vec<DistanceRow>> {
    if z.nrows() != truth.len() || truth.len() != instance_ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings, {} labels, {} ids",
            z.nrows(),
            truth.len(),
            instance_ids.len()
        )));
    }
    Ok(z.rows()
        .into_iter()
        .zip(truth)
        .zip(instance_ids)
        .map(|((row, &t), &id)| {
            let p = predict(boundary, row, 1.0);
            let nearest = argmin(&p.distances);
            DistanceRow {
                instance_id: id,
                true_label: t,
                assigned_center: nearest,
                distance: p.distances[nearest],
                radius: boundary.radii[nearest],
                is_open_truth: t == boundary.num_known(),
            }
        })
        .collect())
}

pub fn distance_csv(rows: &[DistanceRow]) -> String {
    let mut out = String::from(
        "# distances are raw Euclidean distances to the nearest center; no clipping applied\n\
         instance_id,true_label,assigned_center,distance,radius,is_open_truth\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.instance_id, r.true_label, r.assigned_center, r.distance, r.radius, r.is_open_truth
        );
    }
    out
}

pub fn export_distances(
    boundary: &BoundaryModel,
    z: &Array2<f64>,
    truth: &[usize],
    instance_ids: &[usize],
    path: &Path,
) -> Result<Vec<DistanceRow>> {
    let rows = distance_table(boundary, z, truth, instance_ids)?;
    fs::write(path, distance_csv(&rows)).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

const CURVE_SAMPLES_PER_CLASS: usize = 10;

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let den = (a.dot(&a) * b.dot(&b)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        a.dot(&b) / den
    }
}

/// Mean pairwise cosine similarity within and across classes over at most 10
/// sampled instances per class.
pub fn similarity_curves<R: Rng + ?Sized>(z: &Array2<f64>, labels: &[usize], rng: &mut R) -> (f64, f64) {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut picked: Vec<(usize, usize)> = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        if members.len() <= CURVE_SAMPLES_PER_CLASS {
            picked.extend(members.iter().map(|&i| (i, c)));
        } else {
            let mut chosen: Vec<usize> = index::sample(rng, members.len(), CURVE_SAMPLES_PER_CLASS)
                .into_iter()
                .map(|j| members[j])
                .collect();
            chosen.sort_unstable();
            picked.extend(chosen.into_iter().map(|i| (i, c)));
        }
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for (a, &(i, ci)) in picked.iter().enumerate() {
        for &(j, cj) in &picked[a + 1..] {
            let c = cosine(z.row(i), z.row(j));
            if ci == cj {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (
        if n_intra == 0 { 0.0 } else { intra / n_intra as f64 },
        if n_inter == 0 { 0.0 } else { inter / n_inter as f64 },
    )
}
