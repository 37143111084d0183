//! Linear probes: L2-regularized multinomial logistic regression on frozen
//! features, the logarithmic λ sweep, and evaluation metrics.

pub mod lbfgs;
pub mod metrics;
pub mod sweep;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use lbfgs::{minimize, LbfgsOptions, LbfgsResult};
pub use metrics::{accuracy, mean_per_class, metric, roc_auc, MetricKind};
pub use sweep::{lambda_grid, sweep_grid, sweep_lambda, SweepResult, GRID_LEN, SEED_EXPONENTS};

use crate::error::{Error, Result};
use crate::ndcore::checkpoint::{read_container, write_container};
use crate::ndcore::graph::softmax_in_place;
use crate::ndcore::{log_sum_exp, Tensor};

pub const FEATURES_MAGIC: [u8; 4] = *b"DCFT";

/// Multinomial logistic regression `softmax(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `[classes, dim]`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ProbeModel {
    /// No-bias layer over fixed weights.
    pub fn from_weights(weights: Tensor) -> Self {
        let k = weights.rows();
        ProbeModel {
            weights,
            bias: vec![0.0; k],
            lambda: 0.0,
            iterations: 0,
            converged: true,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    /// `[N, classes]` logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul(&self.weights.t()?)?;
        let k = self.classes();
        for row in z.data_mut().chunks_mut(k) {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Ok(z)
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.logits(x)?;
        let k = self.classes();
        z.data_mut().chunks_mut(k).for_each(softmax_in_place);
        Ok(z)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Mean cross-entropy without the penalty.
    pub fn data_loss(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let z = self.logits(x)?;
        let k = self.classes();
        Ok(z.data()
            .chunks(k)
            .zip(y)
            .map(|(r, &c)| log_sum_exp(r) - r[c])
            .sum::<f64>()
            / y.len() as f64)
    }

    /// Mean cross-entropy plus `(λ/N)·‖W‖²`.
    pub fn objective(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        Ok(self.data_loss(x, y)? + self.lambda / y.len() as f64 * self.weights.sq_norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lbfgs: LbfgsOptions,
    /// Random initial weights from this seed; zeros when `None`.
    pub init_seed: Option<u64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lbfgs: LbfgsOptions::default(),
            init_seed: None,
        }
    }
}

fn validate_xy(x: &Tensor, y: &[usize]) -> Result<usize> {
    if x.ndim() != 2 || x.rows() != y.len() {
        return Err(Error::Shape {
            op: "fit_logreg",
            left: x.shape().to_vec(),
            right: vec![y.len()],
        });
    }
    if !x.is_finite() {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let k = y.iter().max().map_or(0, |m| m + 1);
    let mut distinct = y.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate("fewer than two classes in labels".into()));
    }
    if y.len() < k {
        return Err(Error::invalid(format!("{} examples for {k} classes", y.len())));
    }
    Ok(k)
}

pub fn fit_logreg(x: &Tensor, y: &[usize], lambda: f64) -> Result<ProbeModel> {
    fit_logreg_with(x, y, lambda, FitOptions::default())
}

/// Minimizes mean cross-entropy + `(λ/N)·‖W‖²_F` with the bias left
/// unregularized.
pub fn fit_logreg_with(x: &Tensor, y: &[usize], lambda: f64, opts: FitOptions) -> Result<ProbeModel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let k = validate_xy(x, y)?;
    let (n, d) = (x.rows(), x.last_dim());
    let nw = k * d;
    let x0 = match opts.init_seed {
        Some(s) => Tensor::randn(&[nw + k], 1.0, &mut ChaCha8Rng::seed_from_u64(s)).into_data(),
        None => vec![0.0; nw + k],
    };
    let reg = lambda / n as f64;
    let mut z = vec![0.0; n * k];
    let f = |theta: &[f64], grad: &mut [f64]| -> f64 {
        let (w, b) = theta.split_at(nw);
        // z = X Wᵀ + b
        for i in 0..n {
            let xi = x.row(i);
            for c in 0..k {
                let wc = &w[c * d..(c + 1) * d];
                z[i * k + c] = b[c] + xi.iter().zip(wc).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        let mut loss = 0.0;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let row = &mut z[i * k..(i + 1) * k];
            loss += log_sum_exp(row) - row[y[i]];
            softmax_in_place(row);
            row[y[i]] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        let (gw, gb) = grad.split_at_mut(nw);
        for i in 0..n {
            let xi = x.row(i);
            for c in 0..k {
                let r = z[i * k + c] * inv_n;
                gb[c] += r;
                gw[c * d..(c + 1) * d].iter_mut().zip(xi).for_each(|(g, xv)| *g += r * xv);
            }
        }
        let mut sq = 0.0;
        for (g, wv) in gw.iter_mut().zip(w) {
            *g += 2.0 * reg * wv;
            sq += wv * wv;
        }
        loss * inv_n + reg * sq
    };
    let r = minimize(f, x0, opts.lbfgs);
    if r.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("probe optimization diverged".into()));
    }
    let (w, b) = r.x.split_at(nw);
    Ok(ProbeModel {
        weights: Tensor::new(&[k, d], w.to_vec())?,
        bias: b.to_vec(),
        lambda,
        iterations: r.iterations,
        converged: r.converged,
    })
}

/// Labeled feature matrix as exchanged between commands.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    n: usize,
    d: usize,
    label_names: Vec<String>,
    labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(x: Tensor, labels: Vec<usize>, label_names: Vec<String>) -> Result<Self> {
        if x.ndim() != 2 || x.rows() != labels.len() {
            return Err(Error::invalid("feature rows and labels disagree"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= label_names.len()) {
            return Err(Error::invalid(format!("label {bad} has no name")));
        }
        Ok(FeatureSet { x, labels, label_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows of `self` followed by rows of `other`; label names must agree.
    pub fn concat(&self, other: &FeatureSet) -> Result<FeatureSet> {
        if self.label_names != other.label_names || self.x.last_dim() != other.x.last_dim() {
            return Err(Error::invalid("feature sets are not compatible"));
        }
        let mut data = self.x.data().to_vec();
        data.extend_from_slice(other.x.data());
        let x = Tensor::new(&[self.len() + other.len(), self.x.last_dim()], data)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(FeatureSet {
            x,
            labels,
            label_names: self.label_names.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FeatureHeader {
            n: self.len(),
            d: self.x.last_dim(),
            label_names: self.label_names.clone(),
            labels: self.labels.clone(),
        };
        write_container(BufWriter::new(File::create(path)?), FEATURES_MAGIC, &header, self.x.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, data): (FeatureHeader, Vec<f64>) =
            read_container(BufReader::new(File::open(path)?), FEATURES_MAGIC)?;
        if data.len() != h.n * h.d {
            return Err(Error::Format(format!(
                "feature payload holds {} values, header says {}×{}",
                data.len(),
                h.n,
                h.d
            )));
        }
        FeatureSet::new(Tensor::new(&[h.n, h.d], data)?, h.labels, h.label_names)
    }
}
