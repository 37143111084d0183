//! Exact binomial statistics for contamination analysis: one-tailed tail
//! probabilities, Clopper–Pearson intervals and the Overlap/Clean report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CONFIDENCE: f64 = 0.995;

/// `P(X ≥ k)` for `X ~ Binomial(n, p)`, summed exactly in log space.
pub fn binomial_sf(k: u64, n: u64, p: f64) -> Result<f64> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    // ln C(n, i) built up from i = 0
    let mut ln_c = 0.0;
    let mut terms = Vec::with_capacity((n - k + 1) as usize);
    for i in 0..=n {
        if i >= k {
            terms.push(ln_c + i as f64 * lp + (n - i) as f64 * lq);
        }
        if i < n {
            ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    Ok((m + s.ln()).exp().min(1.0))
}

/// `P(X ≤ k)`.
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> Result<f64> {
    if k >= n {
        binomial_sf(0, n, p)
    } else {
        Ok(1.0 - binomial_sf(k + 1, n, p)?)
    }
}

/// Root of a function increasing in `p` on `[0, 1]`.
fn bisect(f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Exact two-sided interval for a binomial proportion, found by bisection
/// on the binomial tails.
pub fn clopper_pearson(k: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::invalid("interval needs n ≥ 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} outside (0, 1)")));
    }
    let half = (1.0 - confidence) / 2.0;
    let low = if k == 0 {
        0.0
    } else {
        // P(X ≥ k | p) rises with p
        bisect(|p| Ok(binomial_sf(k, n, p)? - half))?
    };
    let high = if k == n {
        1.0
    } else {
        // P(X ≤ k | p) falls with p
        bisect(|p| Ok(half - binomial_cdf(k, n, p)?))?
    };
    Ok((low, high))
}

/// Corrects a p-value for `tests` comparisons.
pub fn bonferroni(p: f64, tests: usize) -> f64 {
    (p * tests as f64).min(1.0)
}

/// One evaluation example: whether it overlaps the training data and
/// whether the model got it right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapExample {
    pub overlap: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub n_all: usize,
    pub n_overlap: usize,
    pub n_clean: usize,
    /// `|Overlap| / |All|`.
    pub ratio: f64,
    pub acc_all: f64,
    pub acc_overlap: Option<f64>,
    pub acc_clean: f64,
    /// `acc_all − acc_clean`.
    pub delta: f64,
    /// One-tailed `P(X ≥ correct overlap)` with success rate `acc_clean`.
    pub p_value: f64,
    /// Clopper–Pearson interval on the Overlap accuracy.
    pub interval: Option<(f64, f64)>,
    pub confidence: f64,
}

pub fn overlap_report(examples: &[OverlapExample], confidence: f64) -> Result<OverlapReport> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples"));
    }
    let n_all = examples.len();
    let n_overlap = examples.iter().filter(|e| e.overlap).count();
    let n_clean = n_all - n_overlap;
    if n_clean == 0 {
        return Err(Error::Degenerate("every example overlaps; clean accuracy is undefined".into()));
    }
    let correct_all = examples.iter().filter(|e| e.correct).count();
    let correct_overlap = examples.iter().filter(|e| e.overlap && e.correct).count();
    let correct_clean = correct_all - correct_overlap;
    let acc_all = correct_all as f64 / n_all as f64;
    let acc_clean = correct_clean as f64 / n_clean as f64;
    let (acc_overlap, p_value, interval) = if n_overlap == 0 {
        (None, 1.0, None)
    } else {
        (
            Some(correct_overlap as f64 / n_overlap as f64),
            binomial_sf(correct_overlap as u64, n_overlap as u64, acc_clean)?,
            Some(clopper_pearson(correct_overlap as u64, n_overlap as u64, confidence)?),
        )
    };
    Ok(OverlapReport {
        n_all,
        n_overlap,
        n_clean,
        ratio: n_overlap as f64 / n_all as f64,
        acc_all,
        acc_overlap,
        acc_clean,
        delta: if n_overlap == 0 { 0.0 } else { acc_all - acc_clean },
        p_value,
        interval,
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: enumerate every outcome sequence.
    fn enumerate_sf(k: u32, n: u32, p: f64) -> f64 {
        (0u32..1 << n)
            .filter(|m| m.count_ones() >= k)
            .map(|m| {
                let s = m.count_ones() as i32;
                p.powi(s) * (1.0 - p).powi(n as i32 - s)
            })
            .sum()
    }

    fn examples(overlap: (usize, usize), clean: (usize, usize)) -> Vec<OverlapExample> {
        let mut v = Vec::new();
        for i in 0..overlap.0 {
            v.push(OverlapExample { overlap: true, correct: i < overlap.1 });
        }
        for i in 0..clean.0 {
            v.push(OverlapExample { overlap: false, correct: i < clean.1 });
        }
        v
    }

    #[test]
    fn sf_hand_values() {
        assert_eq!(binomial_sf(0, 10, 0.3).unwrap(), 1.0);
        assert!((binomial_sf(8, 10, 0.5).unwrap() - 56.0 / 1024.0).abs() < 1e-15);
        assert!((binomial_sf(12, 12, 0.5).unwrap() - 0.5f64.powi(12)).abs() < 1e-18);
        assert!(binomial_sf(11, 10, 0.5).is_err());
    }

    #[test]
    fn sf_matches_enumeration() {
        for n in 0..=14u32 {
            for k in 0..=n {
                for p in [0.3, 0.5, 0.7] {
                    let a = binomial_sf(k as u64, n as u64, p).unwrap();
                    assert!((a - enumerate_sf(k, n, p)).abs() < 1e-13, "n {n} k {k} p {p}");
                }
            }
        }
    }

    #[test]
    fn cp_closed_forms() {
        let a: f64 = 0.0025;
        let (lo, hi) = clopper_pearson(10, 10, 0.995).unwrap();
        assert_eq!(hi, 1.0);
        assert!((lo - a.powf(0.1)).abs() < 1e-9);
        assert!((lo - 0.5492).abs() < 1e-4);
        let (lo, hi) = clopper_pearson(0, 10, 0.995).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - (1.0 - a.powf(0.1))).abs() < 1e-9);
        assert!(clopper_pearson(0, 0, 0.995).is_err());
    }

    #[test]
    fn cp_contains_estimate_and_narrows() {
        for n in 2..=30u64 {
            for k in 1..n {
                let (lo, hi) = clopper_pearson(k, n, 0.995).unwrap();
                let p = k as f64 / n as f64;
                assert!(lo < p && p < hi);
            }
        }
        let w = |n: u64| {
            let (lo, hi) = clopper_pearson(n / 4, n, 0.995).unwrap();
            hi - lo
        };
        assert!(w(10) > w(40) && w(40) > w(160));
    }

    #[test]
    fn worked_example() {
        let r = overlap_report(&examples((10, 8), (90, 45)), 0.995).unwrap();
        assert!((r.ratio - 0.1).abs() < 1e-15);
        assert!((r.acc_clean - 0.5).abs() < 1e-15);
        assert!((r.acc_all - 0.53).abs() < 1e-15);
        assert!((r.delta - 0.03).abs() < 1e-12);
        assert!((r.p_value - 0.0546875).abs() < 1e-12);
        let (lo, hi) = r.interval.unwrap();
        assert!(lo < 0.8 && 0.8 < hi);
    }

    #[test]
    fn zero_and_full_overlap() {
        let r = overlap_report(&examples((0, 0), (20, 7)), 0.995).unwrap();
        assert_eq!((r.ratio, r.delta, r.p_value, r.interval), (0.0, 0.0, 1.0, None));
        assert!(matches!(overlap_report(&examples((5, 3), (0, 0)), 0.995), Err(Error::Degenerate(_))));
        assert!(overlap_report(&[], 0.995).is_err());
    }

    #[test]
    fn bonferroni_caps_at_one() {
        assert!((bonferroni(0.01, 35) - 0.35).abs() < 1e-15);
        assert_eq!(bonferroni(0.2, 35), 1.0);
    }

    proptest! {
        #[test]
        fn decomposition_identity(no in 0usize..40, co in 0usize..40, nc in 1usize..60, cc in 0usize..60) {
            let co = co.min(no);
            let cc = cc.min(nc);
            let r = overlap_report(&examples((no, co), (nc, cc)), 0.995).unwrap();
            let ao = r.acc_overlap.unwrap_or(0.0);
            prop_assert!((r.acc_all - (r.ratio * ao + (1.0 - r.ratio) * r.acc_clean)).abs() < 1e-12);
            prop_assert!(r.delta.abs() <= r.ratio + 1e-12);
        }

        #[test]
        fn sf_non_increasing_in_k(n in 1u64..40, p in 0.0f64..1.0) {
            let mut prev = 1.0;
            for k in 0..=n {
                let s = binomial_sf(k, n, p).unwrap();
                prop_assert!(s <= prev + 1e-15);
                prev = s;
            }
        }
    }
}
