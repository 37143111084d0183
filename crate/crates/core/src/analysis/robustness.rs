//! Logit-space linear fits of shifted vs in-distribution accuracy and
//! effective robustness.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 10_000;

/// `ln(p / (1 − p))`. Accuracies of exactly 0 or 1 are refused rather than
/// clamped.
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("logit needs 0 < p < 1, got {p}")));
    }
    Ok((p / (1.0 - p)).ln())
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One model's accuracy in and out of distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    #[serde(default)]
    pub name: String,
    pub in_dist: f64,
    pub shift: f64,
}

impl RobustnessPoint {
    pub fn new(name: impl Into<String>, in_dist: f64, shift: f64) -> Self {
        RobustnessPoint {
            name: name.into(),
            in_dist,
            shift,
        }
    }
}

/// Least-squares line in logit-logit space with a percentile bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% percentile intervals; `None` without usable resamples.
    pub slope_ci: Option<(f64, f64)>,
    pub intercept_ci: Option<(f64, f64)>,
    pub resamples: usize,
    /// Resamples whose x values were all equal and were skipped.
    pub degenerate_resamples: usize,
    pub seed: u64,
    #[serde(skip)]
    pub bootstrap: Vec<(f64, f64)>,
}

impl RobustnessFit {
    /// Predicted shifted accuracy for an in-distribution accuracy.
    pub fn predict(&self, in_dist: f64) -> Result<f64> {
        Ok(inv_logit(self.slope * logit(in_dist)? + self.intercept))
    }

    /// The identity baseline `y = x`: no accuracy lost under shift.
    pub fn ideal() -> Self {
        RobustnessFit {
            slope: 1.0,
            intercept: 0.0,
            slope_ci: None,
            intercept_ci: None,
            resamples: 0,
            degenerate_resamples: 0,
            seed: 0,
            bootstrap: Vec::new(),
        }
    }
}

fn least_squares(xy: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn interval(mut v: Vec<f64>) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some((percentile(&v, 0.025), percentile(&v, 0.975)))
}

/// Fits `logit(shift) = slope · logit(in_dist) + intercept`.
///
/// Points are sorted before fitting and resampling, so the result does not
/// depend on input order.
pub fn fit_line(points: &[RobustnessPoint], resamples: usize, seed: u64) -> Result<RobustnessFit> {
    if points.len() < 2 {
        return Err(Error::invalid("a fit needs at least two points"));
    }
    let mut xy = points
        .iter()
        .map(|p| Ok((logit(p.in_dist)?, logit(p.shift)?)))
        .collect::<Result<Vec<_>>>()?;
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (slope, intercept) =
        least_squares(&xy).ok_or_else(|| Error::Degenerate("all in-distribution accuracies are equal".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bootstrap = Vec::with_capacity(resamples);
    let mut degenerate = 0;
    let mut sample = Vec::with_capacity(xy.len());
    for _ in 0..resamples {
        sample.clear();
        sample.extend((0..xy.len()).map(|_| xy[rng.random_range(0..xy.len())]));
        match least_squares(&sample) {
            Some(fit) => bootstrap.push(fit),
            None => degenerate += 1,
        }
    }
    Ok(RobustnessFit {
        slope,
        intercept,
        slope_ci: interval(bootstrap.iter().map(|b| b.0).collect()),
        intercept_ci: interval(bootstrap.iter().map(|b| b.1).collect()),
        resamples,
        degenerate_resamples: degenerate,
        seed,
        bootstrap,
    })
}

/// Shifted accuracy above what the baseline predicts; positive is
/// above-trend.
pub fn effective_robustness(point: &RobustnessPoint, baseline: &RobustnessFit) -> Result<f64> {
    Ok(point.shift - baseline.predict(point.in_dist)?)
}

/// Plot data: model points, then the fit line and bootstrap band over a
/// logit-x grid spanning the points.
pub fn plot_csv(points: &[RobustnessPoint], fit: &RobustnessFit, grid: usize) -> Result<String> {
    let mut out = String::from("kind,name,logit_x,logit_y,fit_y,band_low,band_high\n");
    let mut xs = Vec::with_capacity(points.len());
    for p in points {
        let (x, y) = (logit(p.in_dist)?, logit(p.shift)?);
        xs.push(x);
        let _ = writeln!(out, "point,{},{x},{y},{},,", csv_field(&p.name), fit.slope * x + fit.intercept);
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let steps = grid.max(2);
    for i in 0..steps {
        let x = if lo.is_finite() {
            lo + (hi - lo) * i as f64 / (steps - 1) as f64
        } else {
            0.0
        };
        let band = interval(fit.bootstrap.iter().map(|(s, b)| s * x + b).collect());
        let (bl, bh) = band.map_or((String::new(), String::new()), |(l, h)| (l.to_string(), h.to_string()));
        let _ = writeln!(out, "line,,{x},,{},{bl},{bh}", fit.slope * x + fit.intercept);
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
