//! Randomized checks of open-set prediction and the metric identity.

use openintent::boundary::BoundaryModel;
use openintent::eval;
use rand::Rng;

use super::{rng, unit_rows};

const RATIOS: [f64; 7] = [0.25, 0.5, 0.8, 1.0, 1.2, 2.0, 4.0];

/// One random model and instance set; `Err` names the violated property.
pub fn check_draw(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let known = r.random_range(1..6);
    let dim = r.random_range(2..6);
    let n = r.random_range(1..40);
    let centers = unit_rows(known, dim, &mut r);
    let radii: Vec<f64> = (0..known).map(|_| r.random_range(0.0..1.5)).collect();
    let model = BoundaryModel::new((0..known).map(|k| format!("k{k}")).collect(), &centers, radii);
    let z = unit_rows(n, dim, &mut r);

    let open = known;
    for row in z.rows() {
        let mut previous_open = true;
        for &ratio in &RATIOS {
            let is_open = eval::predict(&model, row, ratio).label == open;
            if is_open && !previous_open {
                return Err(format!("ratio {ratio} turned a known prediction open"));
            }
            previous_open = is_open;
        }
        let at_center = (0..known).any(|k| model.distance(row, k) == 0.0);
        if !at_center && eval::predict(&model, row, 1e-12).label != open {
            return Err("ratio -> 0 left an instance known".into());
        }
        let far = eval::predict(&model, row, 1e12);
        let has_positive_radius = model.radii.iter().any(|&d| d > 0.0);
        if has_positive_radius && far.label == open {
            return Err("ratio -> infinity produced open".into());
        }
    }

    let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..=known)).collect();
    let ratio = RATIOS[r.random_range(0..RATIOS.len())];
    let report = eval::evaluate_with_ratio(&model, &z, &truth, ratio).map_err(|e| e.to_string())?;
    let k = known as f64;
    let combined = (k * report.macro_f1_known + report.f1_unknown) / (k + 1.0);
    if (combined - report.macro_f1_all).abs() > 1e-12 {
        return Err(format!("macro-F1 identity: {combined} vs {}", report.macro_f1_all));
    }
    let mean_f1 = report.per_class.iter().map(|c| c.f1).sum::<f64>() / (k + 1.0);
    if (mean_f1 - report.macro_f1_all).abs() > 1e-12 {
        return Err("macro_f1_all is not the mean per-class F1".into());
    }
    Ok(())
}
