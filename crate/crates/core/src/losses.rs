//! Stage-1 objectives over unit-norm embeddings.
//!
//! All contrastive losses share one building block: for a positive pair
//! `(p, q)` with similarity logit `s = p.q / tau` and a list of negative
//! logits `l_j`, the term is `logsumexp(s, l_1, ..) - s`. The losses differ
//! only in which pairs they enumerate and which rows are contrasted with the
//! negatives:
//!
//! * CL: pair (anchor, first positive); negatives contrasted with the anchor.
//! * KCL: pairs (anchor, each positive), averaged over K.
//! * KCCL: every ordered pair (m, n), m != n, of {anchor} + positives; each
//!   negative is contrasted with both m and n.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Instance indices grouped by label.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    labels: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn new(labels: &[usize], num_classes: usize) -> Self {
        let mut members = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        ClassIndex {
            labels: labels.to_vec(),
            members,
        }
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Uniform class other than `label` (among non-empty classes), then a
    /// uniform instance of it.
    pub fn sample_negative<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Option<usize> {
        let classes: Vec<usize> = (0..self.num_classes())
            .filter(|&c| c != label && !self.members[c].is_empty())
            .collect();
        let class = *classes.choose(rng)?;
        self.members[class].choose(rng).copied()
    }
}

/// Anchor, positives and negatives, as row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSample {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl ContrastiveSample {
    fn remap(&self, f: impl Fn(usize) -> usize) -> Self {
        ContrastiveSample {
            anchor: f(self.anchor),
            positives: self.positives.iter().map(|&i| f(i)).collect(),
            negatives: self.negatives.iter().map(|&i| f(i)).collect(),
        }
    }

    /// Rows of a gathered batch: `rows[i]` is the dataset index of row i.
    pub fn to_rows(&self, position: &std::collections::HashMap<usize, usize>) -> Self {
        self.remap(|i| position[&i])
    }
}

/// Draws K positives from the anchor's class (excluding the anchor; with
/// replacement when the class is too small) and M class-balanced negatives.
pub fn sample_contrastive<R: Rng + ?Sized>(
    index: &ClassIndex,
    anchor: usize,
    k: usize,
    m: usize,
    rng: &mut R,
) -> Result<ContrastiveSample> {
    let label = index.label(anchor);
    let others: Vec<usize> = index
        .members(label)
        .iter()
        .copied()
        .filter(|&i| i != anchor)
        .collect();
    let positives = if others.is_empty() {
        vec![anchor; k]
    } else if others.len() >= k {
        rand::seq::index::sample(rng, others.len(), k)
            .into_iter()
            .map(|j| others[j])
            .collect()
    } else {
        (0..k).map(|_| *others.choose(rng).expect("non-empty")).collect()
    };

    let available = index.len() - index.members(label).len();
    if available == 0 {
        return Err(Error::NoNegative(anchor));
    }
    let mut negatives: Vec<usize> = Vec::with_capacity(m);
    while negatives.len() < m {
        let neg = index
            .sample_negative(label, rng)
            .ok_or(Error::NoNegative(anchor))?;
        if negatives.len() < available && negatives.contains(&neg) {
            continue;
        }
        negatives.push(neg);
    }
    Ok(ContrastiveSample {
        anchor,
        positives,
        negatives,
    })
}

/// Loss value and its gradient with respect to the embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_z: Array2<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("temperature {tau} must be > 0")))
    }
}

fn check_rows(z: &Array2<f64>, samples: &[ContrastiveSample]) -> Result<()> {
    let n = z.nrows();
    for s in samples {
        if s.anchor >= n || s.positives.iter().chain(&s.negatives).any(|&i| i >= n) {
            return Err(Error::ShapeMismatch(format!(
                "sample references a row outside {n} embeddings"
            )));
        }
    }
    Ok(())
}

/// `logsumexp(s, z_c . z_j / tau for c in contrast, j in negatives) - s`
/// with `s = z_p . z_q / tau`, scaled by `scale`. Gradients are accumulated
/// into `grad`.
fn pair_term(
    z: &Array2<f64>,
    (p, q): (usize, usize),
    contrast: &[usize],
    negatives: &[usize],
    tau: f64,
    scale: f64,
    grad: &mut Array2<f64>,
) -> f64 {
    let s = z.row(p).dot(&z.row(q)) / tau;
    let mut logits = Vec::with_capacity(1 + contrast.len() * negatives.len());
    logits.push(s);
    for &c in contrast {
        for &j in negatives {
            logits.push(z.row(c).dot(&z.row(j)) / tau);
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let value = lse - s;

    let weight = |l: f64| (l - max).exp() / sum;
    let ds = (weight(s) - 1.0) * scale / tau;
    add_scaled_row(grad, p, ds, z.row(q));
    add_scaled_row(grad, q, ds, z.row(p));
    let mut li = 1;
    for &c in contrast {
        for &j in negatives {
            let dl = weight(logits[li]) * scale / tau;
            add_scaled_row(grad, c, dl, z.row(j));
            add_scaled_row(grad, j, dl, z.row(c));
            li += 1;
        }
    }
    value * scale
}

fn add_scaled_row(grad: &mut Array2<f64>, row: usize, a: f64, v: ArrayView1<f64>) {
    grad.row_mut(row).scaled_add(a, &v);
}

/// Single-positive contrastive loss; positives beyond the first are ignored.
pub fn cl_loss(z: &Array2<f64>, samples: &[ContrastiveSample], tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    check_rows(z, samples)?;
    let mut grad = Array2::zeros(z.raw_dim());
    if samples.is_empty() {
        return Ok(LossOutput { value: 0.0, grad_z: grad });
    }
    let scale = 1.0 / samples.len() as f64;
    let mut value = 0.0;
    for s in samples {
        let pos = *s
            .positives
            .first()
            .ok_or_else(|| Error::InvalidConfig("sample without positives".into()))?;
        value += pair_term(z, (s.anchor, pos), &[s.anchor], &s.negatives, tau, scale, &mut grad);
    }
    Ok(LossOutput { value, grad_z: grad })
}

/// Anchor-to-positive contrastive loss averaged over the K positives.
pub fn kcl_loss(z: &Array2<f64>, samples: &[ContrastiveSample], tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    check_rows(z, samples)?;
    let mut grad = Array2::zeros(z.raw_dim());
    let n = samples.len() as f64;
    let mut value = 0.0;
    for s in samples {
        if s.positives.is_empty() {
            return Err(Error::InvalidConfig("sample without positives".into()));
        }
        let scale = 1.0 / (n * s.positives.len() as f64);
        for &pos in &s.positives {
            value += pair_term(z, (s.anchor, pos), &[s.anchor], &s.negatives, tau, scale, &mut grad);
        }
    }
    Ok(LossOutput { value, grad_z: grad })
}

/// K-center contrastive loss over all ordered pairs of {anchor} + positives.
pub fn kccl_loss(z: &Array2<f64>, samples: &[ContrastiveSample], tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    check_rows(z, samples)?;
    let mut grad = Array2::zeros(z.raw_dim());
    let n = samples.len() as f64;
    let mut value = 0.0;
    for s in samples {
        let k = s.positives.len();
        if k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        let scale = 1.0 / (n * (k * (k + 1)) as f64);
        let set: Vec<usize> = std::iter::once(s.anchor).chain(s.positives.iter().copied()).collect();
        for (mi, &m) in set.iter().enumerate() {
            for (ni, &nn) in set.iter().enumerate() {
                if mi == ni {
                    continue;
                }
                value += pair_term(z, (m, nn), &[m, nn], &s.negatives, tau, scale, &mut grad);
            }
        }
    }
    Ok(LossOutput { value, grad_z: grad })
}

/// Linear softmax classifier over known classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ClassifierHead {
    pub fn new(num_classes: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "head-init");
        ClassifierHead {
            w2: Array2::from_shape_fn((num_classes, hidden), |_| rng.random_range(-0.1..=0.1)),
            b2: Array1::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadGradients {
    pub fn zeros_like(head: &ClassifierHead) -> Self {
        HeadGradients {
            w2: Array2::zeros(head.w2.raw_dim()),
            b2: Array1::zeros(head.b2.raw_dim()),
        }
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    pub value: f64,
    pub grad_z: Array2<f64>,
    pub head: HeadGradients,
}

/// Mean cross-entropy of `softmax(W2 z + b2)` against `labels`, one per row.
pub fn ce_loss(z: &Array2<f64>, head: &ClassifierHead, labels: &[usize]) -> Result<CeOutput> {
    if labels.len() != z.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            z.nrows()
        )));
    }
    let classes = head.num_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut grad_z = Array2::zeros(z.raw_dim());
    let mut hg = HeadGradients::zeros_like(head);
    if labels.is_empty() {
        return Ok(CeOutput { value: 0.0, grad_z, head: hg });
    }
    let scale = 1.0 / labels.len() as f64;
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let zi = z.row(i);
        let logits = head.w2.dot(&zi) + &head.b2;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp = logits.mapv(|l| (l - max).exp());
        let sum = exp.sum();
        value += (max + sum.ln() - logits[y]) * scale;
        let mut d_logits = exp / sum;
        d_logits[y] -= 1.0;
        d_logits *= scale;
        grad_z.row_mut(i).assign(&head.w2.t().dot(&d_logits));
        for (mut row, &d) in hg.w2.rows_mut().into_iter().zip(d_logits.iter()) {
            row.scaled_add(d, &zi);
        }
        hg.b2 += &d_logits;
    }
    Ok(CeOutput { value, grad_z, head: hg })
}

/// Which contrastive term joins cross-entropy in stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    CeOnly,
    ClCe,
    KclCe,
    KcclCe,
}

impl LossVariant {
    pub fn needs_samples(self) -> bool {
        self != LossVariant::CeOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::CeOnly => "ce",
            LossVariant::ClCe => "cl+ce",
            LossVariant::KclCe => "kcl+ce",
            LossVariant::KcclCe => "kccl+ce",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" | "ce-only" => Ok(LossVariant::CeOnly),
            "cl" | "cl+ce" | "cl-ce" => Ok(LossVariant::ClCe),
            "kcl" | "kcl+ce" | "kcl-ce" => Ok(LossVariant::KclCe),
            "kccl" | "kccl+ce" | "kccl-ce" => Ok(LossVariant::KcclCe),
            other => Err(Error::InvalidConfig(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub tau: f64,
    pub lambda: f64,
    /// Positives per anchor.
    pub k: usize,
    /// Negatives per anchor.
    pub m: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossVariant,
    pub token_dim: usize,
    pub hidden: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            tau: 0.07,
            lambda: 0.25,
            k: 3,
            m: 1,
            learning_rate: 1e-2,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            loss: LossVariant::KcclCe,
            token_dim: crate::encoder::DEFAULT_TOKEN_DIM,
            hidden: crate::encoder::DEFAULT_HIDDEN,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau = {} must be > 0", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda = {} must lie in [0, 1]", self.lambda));
        }
        if self.k == 0 {
            return fail("K must be >= 1".into());
        }
        if self.m == 0 {
            return fail("M must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 || self.token_dim == 0 || self.hidden == 0 {
            return fail("batch size and dimensions must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub value: f64,
    pub contrastive: f64,
    pub ce: f64,
    pub grad_z: Array2<f64>,
    pub head: HeadGradients,
}

/// `lambda * contrastive + (1 - lambda) * CE`, with CE taken on the anchor
/// rows. `labels[i]` is the label of `samples[i].anchor`. The CE-only
/// variant ignores lambda.
pub fn stage1_loss(
    z: &Array2<f64>,
    samples: &[ContrastiveSample],
    head: &ClassifierHead,
    labels: &[usize],
    config: &Stage1Config,
) -> Result<Stage1Output> {
    if labels.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            samples.len()
        )));
    }
    let anchors: Vec<usize> = samples.iter().map(|s| s.anchor).collect();
    check_rows(z, samples)?;
    let za = z.select(Axis(0), &anchors);
    let ce = ce_loss(&za, head, labels)?;

    let (lambda, contrastive) = match config.loss {
        LossVariant::CeOnly => (0.0, None),
        LossVariant::ClCe => (config.lambda, Some(cl_loss(z, samples, config.tau)?)),
        LossVariant::KclCe => (config.lambda, Some(kcl_loss(z, samples, config.tau)?)),
        LossVariant::KcclCe => (config.lambda, Some(kccl_loss(z, samples, config.tau)?)),
    };

    let mut grad_z = match &contrastive {
        Some(c) => &c.grad_z * lambda,
        None => Array2::zeros(z.raw_dim()),
    };
    for (r, &a) in anchors.iter().enumerate() {
        grad_z.row_mut(a).scaled_add(1.0 - lambda, &ce.grad_z.row(r));
    }
    let c_value = contrastive.as_ref().map_or(0.0, |c| c.value);
    let value = match contrastive {
        Some(_) => lambda * c_value + (1.0 - lambda) * ce.value,
        None => ce.value,
    };
    Ok(Stage1Output {
        value,
        contrastive: c_value,
        ce: ce.value,
        grad_z,
        head: HeadGradients {
            w2: ce.head.w2 * (1.0 - lambda),
            b2: ce.head.b2 * (1.0 - lambda),
        },
    })
}
