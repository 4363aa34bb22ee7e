//! Per-class spherical decision boundaries.
//!
//! Each known class k gets a fixed center `c_k` (mean training embedding) and
//! a learnable radius `Δ_k`. The radius loss pulls `Δ_k` toward the in-class
//! distances; the expand/shrink extension adds a term driven by one negative
//! instance per training instance:
//!
//! * negative farther than `Δ + e`: gradient `-η` (radius grows),
//! * negative closer than `Δ + s`: gradient `+η` (radius shrinks),
//! * otherwise no contribution.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassIndex;
use crate::optim::{Adam, AdamConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryModel {
    #[serde(rename = "H")]
    pub hidden: usize,
    pub labels: Vec<String>,
    pub centers: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
}

impl BoundaryModel {
    pub fn new(labels: Vec<String>, centers: &Array2<f64>, radii: Vec<f64>) -> Self {
        BoundaryModel {
            hidden: centers.ncols(),
            labels,
            centers: centers.rows().into_iter().map(|r| r.to_vec()).collect(),
            radii,
        }
    }

    pub fn num_known(&self) -> usize {
        self.radii.len()
    }

    pub fn center(&self, k: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.centers[k][..])
    }

    pub fn distance(&self, z: ArrayView1<f64>, k: usize) -> f64 {
        euclidean(z, self.center(k))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: BoundaryModel = serde_json::from_str(&s)?;
        let consistent = model.centers.len() == model.radii.len()
            && model.labels.len() == model.radii.len()
            && model.centers.iter().all(|c| c.len() == model.hidden);
        if !consistent {
            return Err(Error::Checkpoint(format!(
                "{}: inconsistent boundary model shapes",
                path.display()
            )));
        }
        Ok(model)
    }
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean embedding of each class.
pub fn compute_centers(z: &Array2<f64>, labels: &[usize], num_known: usize) -> Result<Array2<f64>> {
    if labels.len() != z.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            z.nrows()
        )));
    }
    let mut centers = Array2::zeros((num_known, z.ncols()));
    let mut counts = vec![0usize; num_known];
    for (row, &l) in z.rows().into_iter().zip(labels) {
        if l >= num_known {
            return Err(Error::LabelOutOfRange { label: l, classes: num_known });
        }
        centers.row_mut(l).scaled_add(1.0, &row);
        counts[l] += 1;
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass(k));
        }
        centers.row_mut(k).mapv_inplace(|x| x / n as f64);
    }
    Ok(centers)
}

/// Loss value and gradient with respect to the radii.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusLoss {
    pub value: f64,
    pub grad: Array1<f64>,
}

fn check_labels(model: &BoundaryModel, z: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != z.nrows() || z.ncols() != model.hidden {
        return Err(Error::ShapeMismatch(format!(
            "{} labels, embeddings {:?}, boundary dim {}",
            labels.len(),
            z.dim(),
            model.hidden
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.num_known()) {
        return Err(Error::LabelOutOfRange { label: l, classes: model.num_known() });
    }
    Ok(())
}

/// Mean of `|d_i - Δ_{y_i}|`, written in its indicator form; inside-or-on
/// the boundary counts as inside.
pub fn adb_loss(model: &BoundaryModel, z: &Array2<f64>, labels: &[usize]) -> Result<RadiusLoss> {
    check_labels(model, z, labels)?;
    let mut grad = Array1::zeros(model.num_known());
    if labels.is_empty() {
        return Ok(RadiusLoss { value: 0.0, grad });
    }
    let scale = 1.0 / labels.len() as f64;
    let mut value = 0.0;
    for (row, &y) in z.rows().into_iter().zip(labels) {
        let d = model.distance(row, y);
        let radius = model.radii[y];
        if d > radius {
            value += (d - radius) * scale;
            grad[y] -= scale;
        } else {
            value += (radius - d) * scale;
            grad[y] += scale;
        }
    }
    Ok(RadiusLoss { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    Adb,
    Adbes,
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adb" => Ok(BoundaryMode::Adb),
            "adbes" => Ok(BoundaryMode::Adbes),
            other => Err(Error::InvalidConfig(format!("unknown boundary mode {other:?}"))),
        }
    }
}

/// How the radius is kept non-negative during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadiusParam {
    /// Optimize Δ directly and clamp at 0 after each step.
    #[default]
    Clamp,
    /// Optimize r with Δ = ln(1 + e^r).
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub eta: f64,
    pub e: f64,
    pub s: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: BoundaryMode,
    pub radius_param: RadiusParam,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            eta: 1.0,
            e: 0.8,
            s: 0.2,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            mode: BoundaryMode::Adbes,
            radius_param: RadiusParam::Clamp,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.s >= 0.0 && self.e > self.s) {
            return fail(format!("need e > s >= 0, got e = {}, s = {}", self.e, self.s));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return fail(format!("eta = {} must be >= 0", self.eta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        Ok(())
    }
}

/// Radius loss plus the expand/shrink term for one negative per instance.
pub fn adbes_loss(
    model: &BoundaryModel,
    z: &Array2<f64>,
    labels: &[usize],
    negatives: &Array2<f64>,
    negative_labels: &[usize],
    config: &Stage2Config,
) -> Result<RadiusLoss> {
    if config.e <= config.s {
        return Err(Error::InvalidConfig(format!(
            "need e > s, got e = {}, s = {}",
            config.e, config.s
        )));
    }
    if negatives.dim() != z.dim() || negative_labels.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "negatives {:?} for embeddings {:?}",
            negatives.dim(),
            z.dim()
        )));
    }
    if let Some(i) = (0..labels.len()).find(|&i| labels[i] == negative_labels[i]) {
        return Err(Error::NegativeSharesLabel(i));
    }
    let adb = adb_loss(model, z, labels)?;
    if labels.is_empty() {
        return Ok(adb);
    }
    let scale = 1.0 / labels.len() as f64;
    let mut es_value = 0.0;
    let mut es_grad = Array1::<f64>::zeros(model.num_known());
    for (neg, &y) in negatives.rows().into_iter().zip(labels) {
        let d_neg = model.distance(neg, y);
        let radius = model.radii[y];
        if d_neg > radius + config.e {
            es_value += config.eta * (d_neg - (radius + config.e)) * scale;
            es_grad[y] -= config.eta * scale;
        } else if d_neg < radius + config.s {
            es_value += config.eta * ((radius + config.s) - d_neg) * scale;
            es_grad[y] += config.eta * scale;
        }
    }
    Ok(RadiusLoss {
        value: adb.value + es_value,
        grad: adb.grad + es_grad,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inverse(y: f64) -> f64 {
    let y = y.max(1e-6);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct BoundaryResult {
    pub model: BoundaryModel,
    /// Radii after each epoch; row 0 holds the initial radii.
    pub radius_trace: Vec<Vec<f64>>,
}

pub fn radius_trace_csv(trace: &[Vec<f64>]) -> String {
    let k = trace.first().map_or(0, Vec::len);
    let mut out = String::from("epoch");
    for j in 0..k {
        let _ = write!(out, ",radius_{j}");
    }
    out.push('\n');
    for (epoch, row) in trace.iter().enumerate() {
        let _ = write!(out, "{epoch}");
        for r in row {
            let _ = write!(out, ",{r}");
        }
        out.push('\n');
    }
    out
}

/// Mean distance of each class's instances to its center.
pub fn mean_class_distances(z: &Array2<f64>, labels: &[usize], centers: &Array2<f64>) -> Vec<f64> {
    let k = centers.nrows();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in z.rows().into_iter().zip(labels) {
        sums[l] += euclidean(row, centers.row(l));
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}

/// Learns radii over frozen embeddings. Centers are fixed at the class means
/// and radii start at the mean in-class distance. Negatives for the
/// expand/shrink term are drawn class-balanced from the other known classes.
pub fn train_boundary(
    z: &Array2<f64>,
    labels: &[usize],
    label_names: Vec<String>,
    config: &Stage2Config,
) -> Result<BoundaryResult> {
    config.validate()?;
    let num_known = label_names.len();
    let centers = compute_centers(z, labels, num_known)?;
    let init = mean_class_distances(z, labels, &centers);
    let mut model = BoundaryModel::new(label_names, &centers, init.clone());

    let index = ClassIndex::new(labels, num_known);
    if config.mode == BoundaryMode::Adbes && num_known < 2 {
        return Err(Error::NoNegative(0));
    }

    let mut raw: Vec<f64> = match config.radius_param {
        RadiusParam::Clamp => init.clone(),
        RadiusParam::Softplus => init.iter().map(|&d| softplus_inverse(d)).collect(),
    };
    let sync = |raw: &[f64], model: &mut BoundaryModel| {
        for (r, &p) in model.radii.iter_mut().zip(raw) {
            *r = match config.radius_param {
                RadiusParam::Clamp => p,
                RadiusParam::Softplus => softplus(p),
            };
        }
    };
    sync(&raw, &mut model);

    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), &[num_known]);
    let mut rng = rng::stream(config.seed, "stage2");
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut trace = vec![model.radii.clone()];
    let mut step = 0usize;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let zb = z.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = match config.mode {
                BoundaryMode::Adb => adb_loss(&model, &zb, &yb)?,
                BoundaryMode::Adbes => {
                    let neg_idx: Vec<usize> = yb
                        .iter()
                        .zip(chunk)
                        .map(|(&y, &i)| index.sample_negative(y, &mut rng).ok_or(Error::NoNegative(i)))
                        .collect::<Result<_>>()?;
                    let neg_labels: Vec<usize> = neg_idx.iter().map(|&i| labels[i]).collect();
                    let zn = z.select(Axis(0), &neg_idx);
                    adbes_loss(&model, &zb, &yb, &zn, &neg_labels, config)?
                }
            };
            if !loss.value.is_finite() {
                return Err(Error::Diverged { step });
            }
            let grad: Vec<f64> = match config.radius_param {
                RadiusParam::Clamp => loss.grad.to_vec(),
                RadiusParam::Softplus => loss
                    .grad
                    .iter()
                    .zip(&raw)
                    .map(|(g, &r)| g * sigmoid(r))
                    .collect(),
            };
            adam.step(&mut [&mut raw], &[&grad]);
            if config.radius_param == RadiusParam::Clamp {
                raw.iter_mut().for_each(|r| *r = r.max(0.0));
            }
            sync(&raw, &mut model);
            step += 1;
        }
        trace.push(model.radii.clone());
    }
    Ok(BoundaryResult { model, radius_trace: trace })
}
