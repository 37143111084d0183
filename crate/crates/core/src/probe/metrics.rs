use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    MeanPerClass,
    RocAuc,
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "mean_per_class" | "mean-per-class" => Ok(MetricKind::MeanPerClass),
            "roc_auc" | "roc-auc" => Ok(MetricKind::RocAuc),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::invalid("metric over an empty set"));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Recall averaged over the classes present in `labels`.
pub fn mean_per_class(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = vec![0usize; k];
    let mut hit = vec![0usize; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let present: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(t, _)| **t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Area under the ROC curve via the Mann–Whitney rank statistic with
/// midranks for ties. Labels must be 0 or 1 with both present.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("roc_auc needs binary labels"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc needs both classes present"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_auc scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Scores `probs: [N, K]` row-major class probabilities. ROC AUC uses the
/// probability of class 1.
pub fn metric(kind: MetricKind, probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if classes == 0 || probs.len() != labels.len() * classes {
        return Err(Error::invalid("probability matrix does not match labels"));
    }
    match kind {
        MetricKind::RocAuc => {
            if classes != 2 {
                return Err(Error::invalid("roc_auc needs exactly two classes"));
            }
            let s: Vec<f64> = probs.chunks(2).map(|r| r[1]).collect();
            roc_auc(&s, labels)
        }
        _ => {
            let pred: Vec<usize> = probs.chunks(classes).map(crate::ndcore::argmax).collect();
            if kind == MetricKind::Accuracy {
                accuracy(&pred, labels)
            } else {
                mean_per_class(&pred, labels)
            }
        }
    }
}
