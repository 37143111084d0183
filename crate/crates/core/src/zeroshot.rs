//! Zero-shot classifiers synthesized from class names through prompt
//! templates, ensembled in embedding space.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::LogitScale;
use crate::error::{Error, Result};
use crate::model::ClipModel;
use crate::ndcore::checkpoint::{read_container, write_container};
use crate::ndcore::graph::softmax_in_place;
use crate::ndcore::{argmax, Tensor};
use crate::probe::{accuracy, mean_per_class};

pub const DEFAULT_TEMPLATE: &str = "A photo of a {label}.";
pub const CLASSIFIER_MAGIC: [u8; 4] = *b"DCZS";
const PLACEHOLDER: &str = "{label}";
/// Allowed deviation of an image embedding's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let n = pattern.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::invalid(format!(
                "template {pattern:?} must contain exactly one {PLACEHOLDER}, found {n}"
            )));
        }
        Ok(PromptTemplate { pattern })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn fill(&self, label: &str) -> String {
        self.pattern.replace(PLACEHOLDER, label)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

/// One pattern per non-blank line.
pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>> {
    let t: Vec<_> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(PromptTemplate::new)
        .collect::<Result<_>>()?;
    if t.is_empty() {
        return Err(Error::invalid("template file has no patterns"));
    }
    Ok(t)
}

pub fn load_templates(path: &Path) -> Result<Vec<PromptTemplate>> {
    parse_templates(&std::fs::read_to_string(path)?)
}

/// Anything that maps prompts to vectors in the joint space.
pub trait TextEmbedder {
    /// `[texts, d]`; rows need not be normalized.
    fn embed(&self, texts: &[String]) -> Result<Tensor>;
}

impl TextEmbedder for ClipModel {
    fn embed(&self, texts: &[String]) -> Result<Tensor> {
        self.embed_texts(texts)
    }
}

/// Adapts a closure into a [`TextEmbedder`].
pub struct FnEmbedder<F>(pub F);

impl<F: Fn(&[String]) -> Result<Tensor>> TextEmbedder for FnEmbedder<F> {
    fn embed(&self, texts: &[String]) -> Result<Tensor> {
        (self.0)(texts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotClassifier {
    pub class_names: Vec<String>,
    /// `[classes, d]`, unit rows.
    pub weights: Tensor,
    pub logit_scale: LogitScale,
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    class_names: Vec<String>,
    log_scale: f64,
    dim: usize,
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("cannot normalize a zero or non-finite vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// For each class: embed every filled template, normalize each, average,
/// and re-normalize the mean.
pub fn build_classifier<E: TextEmbedder + ?Sized>(
    class_names: &[String],
    templates: &[PromptTemplate],
    embedder: &E,
    logit_scale: LogitScale,
) -> Result<ZeroShotClassifier> {
    if class_names.is_empty() || templates.is_empty() {
        return Err(Error::invalid("zero-shot classifier needs at least one class and one template"));
    }
    let prompts: Vec<String> = class_names
        .iter()
        .flat_map(|c| templates.iter().map(move |t| t.fill(c)))
        .collect();
    let e = embedder.embed(&prompts)?;
    if e.ndim() != 2 || e.rows() != prompts.len() {
        return Err(Error::invalid("embedder returned the wrong number of rows"));
    }
    let d = e.last_dim();
    let t = templates.len();
    let mut weights = vec![0.0; class_names.len() * d];
    for (c, w) in weights.chunks_mut(d).enumerate() {
        for j in 0..t {
            let mut row = e.row(c * t + j).to_vec();
            normalize(&mut row)?;
            w.iter_mut().zip(&row).for_each(|(a, b)| *a += b);
        }
        w.iter_mut().for_each(|x| *x /= t as f64);
        normalize(w)?;
    }
    Ok(ZeroShotClassifier {
        class_names: class_names.to_vec(),
        weights: Tensor::new(&[class_names.len(), d], weights)?,
        logit_scale,
    })
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::invalid(format!("image embedding has norm {n}, expected 1")));
    }
    Ok(())
}

impl ZeroShotClassifier {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// `softmax(exp(log_scale) · W · e)`.
    pub fn predict(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.weights.last_dim() {
            return Err(Error::Shape {
                op: "zeroshot_predict",
                left: vec![embedding.len()],
                right: self.weights.shape().to_vec(),
            });
        }
        check_unit(embedding)?;
        let s = self.logit_scale.scale();
        let mut z: Vec<f64> = (0..self.classes())
            .map(|c| s * self.weights.row(c).iter().zip(embedding).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Row-wise probabilities `[N, classes]`.
    pub fn predict_batch(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(embeddings.rows() * self.classes());
        for i in 0..embeddings.rows() {
            out.extend(self.predict(embeddings.row(i))?);
        }
        Tensor::new(&[embeddings.rows(), self.classes()], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let h = ClassifierHeader {
            class_names: self.class_names.clone(),
            log_scale: self.logit_scale.log_scale,
            dim: self.weights.last_dim(),
        };
        write_container(BufWriter::new(File::create(path)?), CLASSIFIER_MAGIC, &h, self.weights.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, data): (ClassifierHeader, Vec<f64>) =
            read_container(BufReader::new(File::open(path)?), CLASSIFIER_MAGIC)?;
        if h.class_names.is_empty() || data.len() != h.class_names.len() * h.dim {
            return Err(Error::Format("classifier payload does not match header".into()));
        }
        Ok(ZeroShotClassifier {
            weights: Tensor::new(&[h.class_names.len(), h.dim], data)?,
            class_names: h.class_names,
            logit_scale: LogitScale::new(h.log_scale),
        })
    }
}

/// Superclass score = max over its sub-class probabilities.
pub fn pool_subclasses(probs: &[f64], mapping: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut used = vec![false; probs.len()];
    mapping
        .iter()
        .map(|set| {
            if set.is_empty() {
                return Err(Error::invalid("empty sub-class set"));
            }
            let mut best = f64::NEG_INFINITY;
            for &i in set {
                if i >= probs.len() {
                    return Err(Error::invalid(format!("sub-class index {i} out of range")));
                }
                if std::mem::replace(&mut used[i], true) {
                    return Err(Error::invalid(format!("sub-class {i} mapped twice")));
                }
                best = best.max(probs[i]);
            }
            Ok(best)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShotReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_per_class: f64,
    pub predictions: Vec<usize>,
}

pub fn evaluate_zeroshot(
    classifier: &ZeroShotClassifier,
    embeddings: &Tensor,
    labels: &[usize],
) -> Result<ZeroShotReport> {
    if labels.is_empty() {
        return Err(Error::invalid("zero-shot evaluation over an empty set"));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::invalid("embedding rows and labels disagree"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classifier.classes()) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let probs = classifier.predict_batch(embeddings)?;
    let predictions: Vec<usize> = probs.data().chunks(classifier.classes()).map(argmax).collect();
    Ok(ZeroShotReport {
        n: labels.len(),
        accuracy: accuracy(&predictions, labels)?,
        mean_per_class: mean_per_class(&predictions, labels)?,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::probe::ProbeModel;

    /// Embeds each prompt as a fixed random vector keyed by its text.
    fn hash_embedder(d: usize) -> FnEmbedder<impl Fn(&[String]) -> Result<Tensor>> {
        FnEmbedder(move |texts: &[String]| {
            let mut data = Vec::new();
            for t in texts {
                let seed = t.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
                data.extend(Tensor::randn(&[d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_data());
            }
            Tensor::new(&[texts.len(), d], data)
        })
    }

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn unit(mut v: Vec<f64>) -> Vec<f64> {
        normalize(&mut v).unwrap();
        v
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::new("no placeholder").is_err());
        assert!(PromptTemplate::new("{label} {label}").is_err());
        assert_eq!(PromptTemplate::default().fill("dog"), "A photo of a dog.");
        let t = parse_templates("a {label}\n\nthe {label}!\n").unwrap();
        assert_eq!(t.len(), 2);
        assert!(parse_templates("\n").is_err());
    }

    #[test]
    fn single_template_row_is_normalized_prompt() {
        let emb = hash_embedder(5);
        let c = build_classifier(&names(&["cat"]), &[PromptTemplate::default()], &emb, LogitScale::default()).unwrap();
        let direct = unit(emb.embed(&names(&["A photo of a cat."])).unwrap().into_data());
        assert!(c.weights.data().iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn duplicated_templates_are_idempotent() {
        let emb = hash_embedder(6);
        let t = PromptTemplate::new("a {label}").unwrap();
        let cls = names(&["x", "y", "z"]);
        let one = build_classifier(&cls, std::slice::from_ref(&t), &emb, LogitScale::default()).unwrap();
        let three = build_classifier(&cls, &[t.clone(), t.clone(), t], &emb, LogitScale::default()).unwrap();
        assert!(one.weights.max_abs_diff(&three.weights) < 1e-15);
    }

    #[test]
    fn orthogonal_prompts_average_to_diagonal() {
        let emb = FnEmbedder(|texts: &[String]| {
            let rows: Vec<Vec<f64>> = texts
                .iter()
                .map(|t| if t.starts_with('u') { vec![2.0, 0.0] } else { vec![0.0, 5.0] })
                .collect();
            Tensor::from_rows(&rows)
        });
        let ts = [PromptTemplate::new("u {label}").unwrap(), PromptTemplate::new("v {label}").unwrap()];
        let c = build_classifier(&names(&["k"]), &ts, &emb, LogitScale::default()).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c.weights.data()[0] - h).abs() < 1e-15 && (c.weights.data()[1] - h).abs() < 1e-15);
    }

    #[test]
    fn two_class_prediction() {
        let c = ZeroShotClassifier {
            class_names: names(&["e", "f"]),
            weights: Tensor::eye(2),
            logit_scale: LogitScale::new(3f64.ln()),
        };
        let p = c.predict(&[1.0, 0.0]).unwrap();
        let mut expect = vec![3.0, 0.0];
        softmax_in_place(&mut expect);
        assert!((p[0] - expect[0]).abs() < 1e-15 && (p[1] - expect[1]).abs() < 1e-15);
        assert!(c.predict(&[2.0, 0.0]).is_err());
        assert!(c.predict(&[1.0, 1e-7]).is_ok());
    }

    #[test]
    fn matches_no_bias_logistic_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = hash_embedder(8);
        let c = build_classifier(&names(&["a", "b", "c", "d"]), &[PromptTemplate::default()], &emb, LogitScale::default()).unwrap();
        let probe = ProbeModel::from_weights(c.weights.map(|w| w * c.logit_scale.scale()));
        let mut x = Tensor::randn(&[200, 8], 1.0, &mut rng);
        for r in x.data_mut().chunks_mut(8) {
            normalize(r).unwrap();
        }
        let a = c.predict_batch(&x).unwrap();
        let b = probe.predict_proba(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
        for r in 0..200 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_never_changes_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = hash_embedder(4);
        let cls = names(&["p", "q", "r"]);
        let mut x = Tensor::randn(&[50, 4], 1.0, &mut rng);
        for r in x.data_mut().chunks_mut(4) {
            normalize(r).unwrap();
        }
        let base = build_classifier(&cls, &[PromptTemplate::default()], &emb, LogitScale::new(0.0)).unwrap();
        let preds = |c: &ZeroShotClassifier| c.predict_batch(&x).unwrap().argmax_rows();
        let p0 = preds(&base);
        for s in [0.5, 2.0, 4.6] {
            let c = ZeroShotClassifier { logit_scale: LogitScale::new(s), ..base.clone() };
            assert_eq!(preds(&c), p0);
        }
    }

    #[test]
    fn cached_classifier_round_trips_and_predicts_identically() {
        let emb = hash_embedder(5);
        let c = build_classifier(&names(&["a", "b"]), &[PromptTemplate::default()], &emb, LogitScale::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zs.bin");
        c.save(&path).unwrap();
        let back = ZeroShotClassifier::load(&path).unwrap();
        assert_eq!(back, c);
        let rebuilt = build_classifier(&names(&["a", "b"]), &[PromptTemplate::default()], &emb, LogitScale::default()).unwrap();
        let e = unit(vec![0.3, -0.2, 0.9, 0.1, 0.0]);
        assert_eq!(back.predict(&e).unwrap(), rebuilt.predict(&e).unwrap());
    }

    #[test]
    fn subclass_pooling() {
        let probs = [0.2, 0.7, 0.05, 0.05];
        let singles: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        assert_eq!(pool_subclasses(&probs, &singles).unwrap(), probs);
        assert_eq!(pool_subclasses(&probs, &[vec![0, 1]]).unwrap(), vec![0.7]);
        assert!(pool_subclasses(&probs, &[vec![]]).is_err());
        assert!(pool_subclasses(&probs, &[vec![0], vec![0, 1]]).is_err());
    }

    #[test]
    fn pooled_argmax_matches_exhaustive_pairs() {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let k = rng.random_range(1..=8);
            let probs: Vec<f64> = (0..k).map(|_| rng.random()).collect();
            let mut idx: Vec<usize> = (0..k).collect();
            idx.shuffle(&mut rng);
            let s = rng.random_range(1..=k);
            let mut mapping = vec![Vec::new(); s];
            for (j, &i) in idx.iter().enumerate() {
                mapping[if j < s { j } else { rng.random_range(0..s) }].push(i);
            }
            let pooled = pool_subclasses(&probs, &mapping).unwrap();
            let mut best = (0, f64::NEG_INFINITY);
            for (sup, set) in mapping.iter().enumerate() {
                for &i in set {
                    if probs[i] > best.1 {
                        best = (sup, probs[i]);
                    }
                }
            }
            assert_eq!(argmax(&pooled), best.0);
        }
    }

    #[test]
    fn evaluation_metrics() {
        let c = ZeroShotClassifier {
            class_names: names(&["a", "b"]),
            weights: Tensor::eye(2),
            logit_scale: LogitScale::default(),
        };
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = evaluate_zeroshot(&c, &x, &[0, 1, 0]).unwrap();
        assert_eq!((r.accuracy, r.mean_per_class), (1.0, 1.0));
        let one = evaluate_zeroshot(&c, &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &[1]).unwrap();
        assert_eq!(one.accuracy, 0.0);
        assert!(evaluate_zeroshot(&c, &Tensor::zeros(&[0, 2]), &[]).is_err());
        assert!(evaluate_zeroshot(&c, &x, &[0, 1, 2]).is_err());
    }
}
