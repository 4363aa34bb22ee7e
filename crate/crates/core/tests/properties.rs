mod common;

use ndarray::{Array2, s};
use openintent::boundary::{self, BoundaryModel, Stage2Config};
use openintent::data::LabeledInstance;
use openintent::encoder::{self, EncoderModel};
use openintent::losses::{self, ClassifierHead, ContrastiveSample};
use proptest::prelude::*;

use common::{disjoint_samples, rng, unit_rows};

type LossFn = fn(&Array2<f64>, &[ContrastiveSample], f64) -> openintent::Result<losses::LossOutput>;

const CONTRASTIVE: [(&str, LossFn); 3] = [
    ("cl", losses::cl_loss),
    ("kcl", losses::kcl_loss),
    ("kccl", losses::kccl_loss),
];

/// Rotates `row` of `z` a fraction `t` of the way toward `target` along the
/// great circle.
fn pull(z: &mut Array2<f64>, row: usize, target: usize, t: f64) {
    let a = z.row(target).to_owned();
    let p = z.row(row).to_owned();
    let moved = &p + &((&a - &p) * t);
    let norm = moved.dot(&moved).sqrt();
    z.row_mut(row).assign(&(moved / norm));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_losses_are_finite_and_nonnegative(
        seed in any::<u64>(), n in 1usize..4, k in 1usize..5, m in 1usize..4, tau in 0.02f64..2.0,
    ) {
        let (samples, rows) = disjoint_samples(n, k, m);
        let z = unit_rows(rows, 6, &mut rng(seed));
        for (name, loss) in CONTRASTIVE {
            let out = loss(&z, &samples, tau).unwrap();
            prop_assert!(out.value.is_finite() && out.value >= 0.0, "{name}: {}", out.value);
            prop_assert!(out.grad_z.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn cross_entropy_is_finite_and_nonnegative(seed in any::<u64>(), n in 1usize..10, classes in 2usize..6) {
        let mut r = rng(seed);
        let z = unit_rows(n, 5, &mut r);
        let head = ClassifierHead { w2: common::gaussian(classes, 5, &mut r) * 10.0, b2: ndarray::Array1::zeros(classes) };
        let labels = common::random_labels(n, classes, &mut r);
        let out = losses::ce_loss(&z, &head, &labels).unwrap();
        prop_assert!(out.value.is_finite() && out.value >= 0.0);
    }

    #[test]
    fn kccl_is_invariant_to_positive_order(seed in any::<u64>(), k in 2usize..6, m in 1usize..4) {
        let (samples, rows) = disjoint_samples(2, k, m);
        let z = unit_rows(rows, 6, &mut rng(seed));
        let base = losses::kccl_loss(&z, &samples, 0.1).unwrap().value;
        let shuffled: Vec<ContrastiveSample> = samples
            .iter()
            .map(|s| {
                let mut p = s.positives.clone();
                p.rotate_left(1 + seed as usize % k);
                p.swap(0, k - 1);
                ContrastiveSample { positives: p, ..s.clone() }
            })
            .collect();
        let permuted = losses::kccl_loss(&z, &shuffled, 0.1).unwrap().value;
        prop_assert!((base - permuted).abs() < 1e-12);
    }

    /// CL and KCL see the positive only through its similarity to the anchor.
    #[test]
    fn pulling_a_positive_closer_never_increases_anchor_losses(
        seed in any::<u64>(), k in 1usize..4, m in 1usize..4, t in 0.0f64..1.0,
    ) {
        let (samples, rows) = disjoint_samples(1, k, m);
        let z = unit_rows(rows, 6, &mut rng(seed));
        let mut closer = z.clone();
        pull(&mut closer, samples[0].positives[0], samples[0].anchor, t);
        for (name, loss) in &CONTRASTIVE[..2] {
            let before = loss(&z, &samples, 0.1).unwrap().value;
            let after = loss(&closer, &samples, 0.1).unwrap().value;
            prop_assert!(after <= before + 1e-12, "{name}: {before} -> {after}");
        }
    }

    /// KCCL also contrasts positives with negatives, so the negatives are kept
    /// orthogonal to the plane the pull happens in; the other positives
    /// coincide with the anchor so every positive pair similarity grows.
    #[test]
    fn pulling_a_positive_closer_never_increases_kccl(
        seed in any::<u64>(), k in 1usize..4, m in 1usize..4, t in 0.0f64..1.0,
    ) {
        let (samples, rows) = disjoint_samples(1, k, m);
        let s0 = &samples[0];
        let mut r = rng(seed);
        let mut z = Array2::zeros((rows, 6));
        z.slice_mut(s![.., ..2]).assign(&unit_rows(rows, 2, &mut r));
        for &j in &s0.negatives {
            z.row_mut(j).fill(0.0);
            z.slice_mut(s![j, 2..]).assign(&unit_rows(1, 4, &mut r).row(0));
        }
        let anchor = z.row(s0.anchor).to_owned();
        for &p in &s0.positives[1..] {
            z.row_mut(p).assign(&anchor);
        }
        let mut closer = z.clone();
        pull(&mut closer, s0.positives[0], s0.anchor, t);
        let before = losses::kccl_loss(&z, &samples, 0.1).unwrap().value;
        let after = losses::kccl_loss(&closer, &samples, 0.1).unwrap().value;
        prop_assert!(after <= before + 1e-12, "{before} -> {after}");
    }

    #[test]
    fn encoder_outputs_unit_vectors(seed in any::<u64>(), lens in proptest::collection::vec(1usize..12, 1..8)) {
        let model = EncoderModel::new(30, 8, 16, seed);
        let mut r = rng(seed);
        let batch: Vec<LabeledInstance> = lens
            .iter()
            .map(|&n| LabeledInstance { token_ids: (0..n).map(|_| rand::Rng::random_range(&mut r, 1..30)).collect(), label: 0 })
            .collect();
        match encoder::encode(&model, &batch) {
            Ok(out) => {
                for row in out.z.rows() {
                    prop_assert!((row.dot(&row) - 1.0).abs() < 1e-12);
                }
            }
            Err(openintent::Error::ZeroEmbedding { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    /// Sweeping one negative outward moves its radius-gradient contribution
    /// through +eta, 0, -eta in that order.
    #[test]
    fn adbes_response_is_monotone(
        eta in 0.05f64..1.0, s in 0.0f64..0.5, gap in 0.05f64..0.7, radius in 0.0f64..1.0,
    ) {
        let e = s + gap;
        let config = Stage2Config { eta, e, s, ..Stage2Config::default() };
        let centers = ndarray::array![[0.0, 0.0], [5.0, 5.0]];
        let model = BoundaryModel::new(vec!["a".into(), "b".into()], &centers, vec![radius, 1.0]);
        // The instance itself sits on the boundary, so ADB contributes +1.
        let z = ndarray::array![[radius, 0.0]];
        let adb = boundary::adb_loss(&model, &z, &[0]).unwrap().grad[0];
        let mut previous = f64::INFINITY;
        for step in 0..200 {
            let d = step as f64 * 0.02;
            let neg = ndarray::array![[0.0, d]];
            let g = boundary::adbes_loss(&model, &z, &[0], &neg, &[1], &config).unwrap().grad[0] - adb;
            let expected = if d > radius + e { -eta } else if d < radius + s { eta } else { 0.0 };
            prop_assert!((g - expected).abs() < 1e-12, "d = {d}: {g} vs {expected}");
            prop_assert!(g <= previous + 1e-12);
            previous = g;
        }
    }

    #[test]
    fn inference_properties(seed in any::<u64>()) {
        prop_assert_eq!(common::inference::check_draw(seed), Ok(()));
    }

    #[test]
    fn radii_stay_nonnegative_during_training(seed in any::<u64>(), eta in 0.0f64..1.0) {
        let mut r = rng(seed);
        let z = unit_rows(40, 4, &mut r);
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let config = Stage2Config { eta, e: 0.5, s: 0.45, epochs: 20, learning_rate: 0.2, seed, ..Stage2Config::default() };
        let result = boundary::train_boundary(&z, &labels, vec!["a".into(), "b".into(), "c".into()], &config).unwrap();
        for row in &result.radius_trace {
            prop_assert!(row.iter().all(|&d| d >= 0.0));
        }
    }
}
