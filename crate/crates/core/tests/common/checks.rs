//! Finite-difference gradient checks shared by the gradient and acceptance
//! targets. Each returns the relative error of one analytic gradient.

use ndarray::{Array1, Array2};
use openintent::boundary::{self, BoundaryModel, Stage2Config};
use openintent::data::LabeledInstance;
use openintent::encoder::{self, EncoderModel};
use openintent::losses::{self, ClassifierHead, ContrastiveSample, LossVariant, Stage1Config};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{disjoint_samples, gaussian, numeric_gradient, random_labels, relative_error, rng, unit_rows};

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: [u64; 3] = [11, 22, 33];

const N: usize = 4;
const K: usize = 3;
const M: usize = 2;
const H: usize = 8;
const TAU: f64 = 0.07;

type LossFn = fn(&Array2<f64>, &[ContrastiveSample], f64) -> openintent::Result<losses::LossOutput>;

fn contrastive(seed: u64, loss: LossFn) -> f64 {
    let mut r = rng(seed);
    let (samples, rows) = disjoint_samples(N, K, M);
    let mut z = unit_rows(rows, H, &mut r);
    let analytic = loss(&z, &samples, TAU).unwrap().grad_z;
    let shape = z.raw_dim();
    let numeric = numeric_gradient(z.as_slice_mut().unwrap(), EPS, |x| {
        let zz = Array2::from_shape_vec(shape, x.to_vec()).unwrap();
        loss(&zz, &samples, TAU).unwrap().value
    });
    relative_error(analytic.as_slice().unwrap(), &numeric)
}

pub fn cl(seed: u64) -> f64 {
    contrastive(seed, losses::cl_loss)
}

pub fn kcl(seed: u64) -> f64 {
    contrastive(seed, losses::kcl_loss)
}

pub fn kccl(seed: u64) -> f64 {
    contrastive(seed, losses::kccl_loss)
}

fn random_head(classes: usize, r: &mut ChaCha8Rng) -> ClassifierHead {
    ClassifierHead {
        w2: gaussian(classes, H, r),
        b2: gaussian(1, classes, r).row(0).to_owned(),
    }
}

/// Cross-entropy with respect to Z, W2 and b2 (worst of the three).
pub fn ce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let classes = 5;
    let mut z = unit_rows(6, H, &mut r);
    let mut head = random_head(classes, &mut r);
    let labels = random_labels(6, classes, &mut r);
    let out = losses::ce_loss(&z, &head, &labels).unwrap();

    let shape = z.raw_dim();
    let h2 = head.clone();
    let nz = numeric_gradient(z.as_slice_mut().unwrap(), EPS, |x| {
        let zz = Array2::from_shape_vec(shape, x.to_vec()).unwrap();
        losses::ce_loss(&zz, &h2, &labels).unwrap().value
    });
    let zc = z.clone();
    let wshape = head.w2.raw_dim();
    let b2 = head.b2.clone();
    let nw = numeric_gradient(head.w2.as_slice_mut().unwrap(), EPS, |x| {
        let h = ClassifierHead { w2: Array2::from_shape_vec(wshape, x.to_vec()).unwrap(), b2: b2.clone() };
        losses::ce_loss(&zc, &h, &labels).unwrap().value
    });
    let w2 = head.w2.clone();
    let nb = numeric_gradient(head.b2.as_slice_mut().unwrap(), EPS, |x| {
        let h = ClassifierHead { w2: w2.clone(), b2: Array1::from(x.to_vec()) };
        losses::ce_loss(&zc, &h, &labels).unwrap().value
    });
    [
        relative_error(out.grad_z.as_slice().unwrap(), &nz),
        relative_error(out.head.w2.as_slice().unwrap(), &nw),
        relative_error(out.head.b2.as_slice().unwrap(), &nb),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Stage-1 mixture with respect to Z and the head, for every variant.
pub fn mix(seed: u64) -> f64 {
    let mut r = rng(seed);
    let classes = 4;
    let (samples, rows) = disjoint_samples(N, K, M);
    let mut z = unit_rows(rows, H, &mut r);
    let mut head = random_head(classes, &mut r);
    let labels = random_labels(N, classes, &mut r);
    let mut worst: f64 = 0.0;
    for loss in [LossVariant::CeOnly, LossVariant::ClCe, LossVariant::KclCe, LossVariant::KcclCe] {
        let config = Stage1Config { loss, lambda: 0.3, tau: TAU, ..Stage1Config::default() };
        let out = losses::stage1_loss(&z, &samples, &head, &labels, &config).unwrap();
        let shape = z.raw_dim();
        let h2 = head.clone();
        let nz = numeric_gradient(z.as_slice_mut().unwrap(), EPS, |x| {
            let zz = Array2::from_shape_vec(shape, x.to_vec()).unwrap();
            losses::stage1_loss(&zz, &samples, &h2, &labels, &config).unwrap().value
        });
        let zc = z.clone();
        let wshape = head.w2.raw_dim();
        let b2 = head.b2.clone();
        let nw = numeric_gradient(head.w2.as_slice_mut().unwrap(), EPS, |x| {
            let h = ClassifierHead { w2: Array2::from_shape_vec(wshape, x.to_vec()).unwrap(), b2: b2.clone() };
            losses::stage1_loss(&zc, &samples, &h, &labels, &config).unwrap().value
        });
        worst = worst
            .max(relative_error(out.grad_z.as_slice().unwrap(), &nz))
            .max(relative_error(out.head.w2.as_slice().unwrap(), &nw));
    }
    worst
}

/// A boundary problem with every distance at least `margin` away from the
/// kinks of the radius losses, so central differences stay on one linear
/// piece.
struct RadiusProblem {
    model: BoundaryModel,
    z: Array2<f64>,
    labels: Vec<usize>,
    negatives: Array2<f64>,
    negative_labels: Vec<usize>,
    config: Stage2Config,
}

fn radius_problem(seed: u64) -> RadiusProblem {
    let mut r = rng(seed);
    let classes = 3;
    let n = 12;
    let config = Stage2Config { eta: 0.7, e: 0.5, s: 0.1, ..Stage2Config::default() };
    let margin = 10.0 * EPS;
    loop {
        let centers = unit_rows(classes, H, &mut r);
        let radii: Vec<f64> = (0..classes).map(|_| r.random_range(0.3..1.4)).collect();
        let model = BoundaryModel::new((0..classes).map(|k| format!("c{k}")).collect(), &centers, radii);
        let z = unit_rows(n, H, &mut r);
        let negatives = unit_rows(n, H, &mut r);
        let labels = random_labels(n, classes, &mut r);
        let negative_labels: Vec<usize> = labels.iter().map(|&y| (y + 1 + r.random_range(0..classes - 1)) % classes).collect();
        let clear = (0..n).all(|i| {
            let y = labels[i];
            let radius = model.radii[y];
            let d = model.distance(z.row(i), y);
            let dn = model.distance(negatives.row(i), y);
            (d - radius).abs() > margin
                && (dn - radius - config.e).abs() > margin
                && (dn - radius - config.s).abs() > margin
        });
        if clear {
            return RadiusProblem { model, z, labels, negatives, negative_labels, config };
        }
    }
}

fn radius_check(seed: u64, adbes: bool) -> f64 {
    let p = radius_problem(seed);
    let eval = |model: &BoundaryModel| {
        if adbes {
            boundary::adbes_loss(model, &p.z, &p.labels, &p.negatives, &p.negative_labels, &p.config).unwrap()
        } else {
            boundary::adb_loss(model, &p.z, &p.labels).unwrap()
        }
    };
    let analytic = eval(&p.model).grad;
    let mut radii = p.model.radii.clone();
    let mut probe = p.model.clone();
    let numeric = numeric_gradient(&mut radii, EPS, |x| {
        probe.radii = x.to_vec();
        eval(&probe).value
    });
    relative_error(analytic.as_slice().unwrap(), &numeric)
}

pub fn adb(seed: u64) -> f64 {
    radius_check(seed, false)
}

pub fn adbes(seed: u64) -> f64 {
    radius_check(seed, true)
}

/// Encoder parameters (vocab 10, token dim 4, hidden 4) under a random
/// linear functional of Z.
pub fn encoder(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (vocab, d_tok, hidden) = (10, 4, 4);
    loop {
        let mut model = EncoderModel::new(vocab, d_tok, hidden, seed);
        model.token_embeddings = gaussian(vocab, d_tok, &mut r);
        model.w1 = gaussian(hidden, d_tok, &mut r);
        model.b1 = gaussian(1, hidden, &mut r).row(0).to_owned() + 0.5;
        let batch: Vec<LabeledInstance> = (0..5)
            .map(|_| {
                let len = r.random_range(2..7);
                LabeledInstance { token_ids: (0..len).map(|_| r.random_range(1..vocab)).collect(), label: 0 }
            })
            .collect();
        let Ok(forward) = encoder::encode(&model, &batch) else { continue };
        // Central differences are invalid near a ReLU kink.
        let near_kink = batch.iter().any(|inst| {
            let pooled = inst
                .token_ids
                .iter()
                .fold(Array1::<f64>::zeros(d_tok), |acc, &t| acc + model.token_embeddings.row(t))
                / inst.token_ids.len() as f64;
            (model.w1.dot(&pooled) + &model.b1).iter().any(|&a| a.abs() < 1e-2)
        });
        if near_kink {
            continue;
        }
        let g = gaussian(batch.len(), hidden, &mut r);
        let grads = encoder::encode_backward(&model, &batch, &forward, &g).unwrap();
        let objective = |m: &EncoderModel| (encoder::encode(m, &batch).unwrap().z * &g).sum();

        let mut worst: f64 = 0.0;
        for (group, analytic) in grads.slices().into_iter().enumerate() {
            let mut probe = model.clone();
            let mut values = probe.params_mut()[group].to_vec();
            let numeric = numeric_gradient(&mut values, EPS, |x| {
                probe.params_mut()[group].copy_from_slice(x);
                objective(&probe)
            });
            worst = worst.max(relative_error(analytic, &numeric));
        }
        return worst;
    }
}

/// Every check over every seed as `(name, worst relative error)`.
pub fn all() -> Vec<(&'static str, f64)> {
    type Check = (&'static str, fn(u64) -> f64);
    let checks: [Check; 8] = [
        ("cl", cl),
        ("kccl", kccl),
        ("kcl", kcl),
        ("ce", ce),
        ("stage1 mix", mix),
        ("adb", adb),
        ("adbes", adbes),
        ("encoder", encoder),
    ];
    checks
        .iter()
        .map(|&(name, f)| (name, SEEDS.iter().map(|&s| f(s)).fold(0.0, f64::max)))
        .collect()
}
