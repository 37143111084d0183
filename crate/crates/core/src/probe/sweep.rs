use std::collections::BTreeMap;

use serde::Serialize;

use super::metrics::{metric, MetricKind};
use super::{fit_logreg, FeatureSet};
use crate::error::{Error, Result};

/// Grid points: exponents `-6 + k/8` for `k = 0..96`.
pub const GRID_LEN: usize = 96;
const STEPS_PER_DECADE: usize = 8;
pub const SEED_EXPONENTS: [i32; 7] = [-6, -4, -2, 0, 2, 4, 6];

/// λ values `10^(-6 + k/8)`, from 1e-6 to 10^5.875.
pub fn lambda_grid() -> Vec<f64> {
    (0..GRID_LEN).map(grid_value).collect()
}

fn grid_value(k: usize) -> f64 {
    10f64.powf(-6.0 + k as f64 / STEPS_PER_DECADE as f64)
}

fn seed_index(exp: i32) -> usize {
    (((exp + 6) as usize) * STEPS_PER_DECADE).min(GRID_LEN - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    /// `(λ, validation score)` in evaluation order.
    pub evaluated: Vec<(f64, f64)>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    pub best_score: f64,
    /// Score on the held-out test split after refitting on train+val.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_score: Option<f64>,
}

/// Coarse-to-fine search over grid indices: the seven seed points, then
/// repeatedly the midpoints between the current peak and its nearest
/// evaluated neighbours until both are adjacent. Ties go to the smaller λ.
pub fn sweep_grid(mut score: impl FnMut(f64) -> Result<f64>) -> Result<SweepResult> {
    let mut seen: BTreeMap<usize, f64> = BTreeMap::new();
    let mut evaluated = Vec::new();
    let mut eval = |k: usize, seen: &mut BTreeMap<usize, f64>| -> Result<()> {
        if !seen.contains_key(&k) {
            let lam = grid_value(k);
            let s = score(lam)?;
            if s.is_nan() {
                return Err(Error::invalid(format!("validation score is NaN at lambda {lam}")));
            }
            seen.insert(k, s);
            evaluated.push((lam, s));
        }
        Ok(())
    };
    for e in SEED_EXPONENTS {
        eval(seed_index(e), &mut seen)?;
    }
    loop {
        let peak = peak_index(&seen);
        let left = seen.range(..peak).next_back().map(|(&k, _)| k);
        let right = seen.range(peak + 1..).next().map(|(&k, _)| k);
        let mut refined = false;
        if let Some(l) = left.filter(|&l| peak - l > 1) {
            eval((l + peak) / 2, &mut seen)?;
            refined = true;
        }
        if let Some(r) = right.filter(|&r| r - peak > 1) {
            eval((peak + r) / 2, &mut seen)?;
            refined = true;
        }
        if !refined {
            break;
        }
    }
    let peak = peak_index(&seen);
    Ok(SweepResult {
        evaluated,
        chosen_index: peak,
        chosen_lambda: grid_value(peak),
        best_score: seen[&peak],
        test_score: None,
    })
}

fn peak_index(seen: &BTreeMap<usize, f64>) -> usize {
    // iteration is ascending, so strict > keeps the smallest λ among ties
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (&k, &s) in seen {
        if best.0 == usize::MAX || s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Tunes λ on `val`, refits on train+val, and reports the test score.
pub fn sweep_lambda(
    train: &FeatureSet,
    val: &FeatureSet,
    test: &FeatureSet,
    kind: MetricKind,
) -> Result<SweepResult> {
    if val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let classes = train.label_names.len();
    let mut result = sweep_grid(|lam| {
        let m = fit_logreg(&train.x, &train.labels, lam)?;
        score_padded(&m, val, classes, kind)
    })?;
    let all = train.concat(val)?;
    let m = fit_logreg(&all.x, &all.labels, result.chosen_lambda)?;
    result.test_score = Some(score_padded(&m, test, classes, kind)?);
    Ok(result)
}

/// Scores a probe whose class count may be below the label-name count
/// (top classes absent from training) by treating missing classes as
/// probability zero.
fn score_padded(m: &super::ProbeModel, set: &FeatureSet, classes: usize, kind: MetricKind) -> Result<f64> {
    let p = m.predict_proba(&set.x)?;
    let k = m.classes();
    let mut padded = vec![0.0; set.len() * classes];
    for i in 0..set.len() {
        padded[i * classes..i * classes + k].copy_from_slice(p.row(i));
    }
    metric(kind, &padded, classes, &set.labels)
}
