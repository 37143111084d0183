//! Near-duplicate detection: a ViT image tower trained to match images to
//! their own augmentations against in-batch negatives at a fixed
//! temperature, an exact cosine index, and the Overlap/Clean split.

pub mod augment;

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{augment, hsv_to_rgb, rgb_to_hsv, rotate, AugmentConfig, Range};

use crate::contrastive::{clip_loss_var, project_normalize_var, INIT_TEMPERATURE};
use crate::datakit::EmbeddingCache;
use crate::encoders::{ImageEncoder, ImageEncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::infer_chunks;
use crate::ndcore::checkpoint::{load_params_file, save_params, save_params_file};
use crate::ndcore::{AdamWConfig, Bound, Graph, OptimizerState, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image: ImageEncoderConfig,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image: ImageEncoderConfig {
                image_size: 32,
                patch_size: 8,
                layers: 2,
                width: 64,
                heads: 4,
                pre_norm: true,
            },
            embed_dim: 64,
            batch_size: 64,
            steps: 1000,
            base_lr: 1e-3,
            warmup_steps: 50,
            weight_decay: 0.1,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

/// Image tower plus projection; similarities are scaled by `1/0.07` and
/// the scale is not a parameter.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
    encoder: ImageEncoder,
    proj: ParamId,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.image.validate()?;
        config.augment.validate()?;
        if config.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = ImageEncoder::new(&mut params, "visual", config.image, &mut rng)?;
        let proj = params.add(
            "proj.image",
            Tensor::randn(&[config.image.width, config.embed_dim], INIT_STD, &mut rng),
            true,
        );
        Ok(Detector {
            config,
            params,
            encoder,
            proj,
        })
    }

    pub fn scale() -> f64 {
        1.0 / INIT_TEMPERATURE
    }

    fn embed_var(&self, g: &mut Graph, p: &Bound, images: &[Image]) -> Result<Var> {
        let f = self.encoder.forward(g, p, images)?;
        project_normalize_var(g, f, p[self.proj])
    }

    /// Symmetric InfoNCE between sources and their views. Returns the loss
    /// and the graph node holding the fixed scale.
    pub fn loss(&self, g: &mut Graph, p: &Bound, sources: &[Image], views: &[Image]) -> Result<(Var, Var)> {
        if sources.len() != views.len() {
            return Err(Error::invalid("sources and views differ in count"));
        }
        if sources.len() < 2 {
            return Err(Error::invalid("a batch of one has no negatives"));
        }
        let a = self.embed_var(g, p, sources)?;
        let b = self.embed_var(g, p, views)?;
        let scale = g.constant(Tensor::scalar(Self::scale()));
        let sims = g.matmul_nt(a, b)?;
        let logits = g.scalar_mul(sims, scale)?;
        Ok((clip_loss_var(g, logits)?, scale))
    }

    /// Unit-norm embeddings `[images, embed_dim]`.
    pub fn embed(&self, images: &[Image]) -> Result<Tensor> {
        infer_chunks(images, |chunk| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let e = self.embed_var(&mut g, &p, chunk)?;
            Ok(g.value(e).clone())
        })
    }

    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        let mut buf = Vec::new();
        save_params(&mut buf, &self.params)?;
        h.update(&buf);
        Ok(hex::encode(h.finalize()))
    }

    /// Writes `detector.json` and `params.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("detector.json"), serde_json::to_vec_pretty(&self.config)?)?;
        save_params_file(&dir.join("params.ckpt"), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: DetectorConfig = serde_json::from_slice(&std::fs::read(dir.join("detector.json"))?)?;
        let mut det = Detector::new(config)?;
        det.params.load_from(&load_params_file(&dir.join("params.ckpt"))?)?;
        Ok(det)
    }

    /// Fraction of augmented views whose nearest source (by cosine) is the
    /// image they came from, over consecutive batches of `batch` images.
    pub fn proxy_accuracy(&self, images: &[Image], batch: usize, seed: u64) -> Result<f64> {
        if batch < 2 || images.len() < 2 {
            return Err(Error::invalid("proxy task needs at least two images per batch"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut hits, mut total) = (0usize, 0usize);
        for chunk in images.chunks(batch).filter(|c| c.len() >= 2) {
            let views = chunk
                .iter()
                .map(|im| augment(im, &self.config.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let a = self.embed(chunk)?;
            let b = self.embed(&views)?;
            let sims = b.matmul(&a.t()?)?;
            hits += sims.argmax_rows().iter().enumerate().filter(|(i, j)| i == *j).count();
            total += chunk.len();
        }
        Ok(hits as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorReport {
    pub losses: Vec<f64>,
    pub fingerprint: String,
}

/// Trains a detector on `images`, augmenting each batch afresh.
pub fn train_detector(images: &[Image], config: &DetectorConfig) -> Result<(Detector, DetectorReport)> {
    if images.len() < 2 || config.batch_size < 2 {
        return Err(Error::invalid("detector training needs batches of at least two images"));
    }
    let mut det = Detector::new(config.clone())?;
    let mut opt_cfg = AdamWConfig::vit(config.base_lr, config.warmup_steps, config.steps);
    opt_cfg.weight_decay = config.weight_decay;
    let mut opt = OptimizerState::new(opt_cfg, &det.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd3d0_0b);
    let bs = config.batch_size.min(images.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor + bs > order.len() {
            order = (0..images.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let sources: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
        let views = sources
            .iter()
            .map(|im| augment(im, &config.augment, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let p = det.params.bind(&mut g);
        let (loss, _) = det.loss(&mut g, &p, &sources, &views)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: step + 1,
                lr: crate::ndcore::cosine_lr(opt.step + 1, &opt.config),
                logit_scale: Detector::scale(),
            });
        }
        let grads = g.backward(loss)?;
        let grads = p.collect_grads(&grads, &det.params);
        opt.adamw_step(&mut det.params, &grads)?;
        losses.push(value);
    }
    let fingerprint = det.fingerprint()?;
    Ok((det, DetectorReport { losses, fingerprint }))
}

/// Exact nearest-neighbour index over unit-norm reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorIndex {
    pub cache: EmbeddingCache,
}

fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.last_dim();
    let mut data = t.data().to_vec();
    for row in data.chunks_exact_mut(d.max(1)) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate("zero-norm embedding row".into()));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::new(t.shape(), data)
}

impl DetectorIndex {
    /// Rows are renormalized to unit length.
    pub fn new(ids: Vec<String>, embeddings: Tensor, fingerprint: impl Into<String>) -> Result<Self> {
        let embeddings = if embeddings.rows() == 0 {
            embeddings
        } else {
            normalize_rows(&embeddings)?
        };
        Ok(DetectorIndex {
            cache: EmbeddingCache::new(ids, embeddings, fingerprint)?,
        })
    }

    pub fn build(detector: &Detector, ids: Vec<String>, images: &[Image]) -> Result<Self> {
        DetectorIndex::new(ids, detector.embed(images)?, detector.fingerprint()?)
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.cache.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cache = EmbeddingCache::load(path)?;
        DetectorIndex::new(cache.ids, cache.embeddings, cache.fingerprint)
    }

    /// Highest cosine similarity and its reference id for each query row;
    /// `None` for an empty index.
    pub fn nearest(&self, queries: &Tensor) -> Result<Vec<Option<(f64, usize)>>> {
        if self.is_empty() {
            return Ok(vec![None; queries.rows()]);
        }
        let q = normalize_rows(queries)?;
        let sims = q.matmul(&self.cache.embeddings.t()?)?;
        Ok((0..sims.rows())
            .map(|i| {
                let row = sims.row(i);
                let j = crate::ndcore::argmax(row);
                Some((row[j], j))
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSplit {
    pub threshold: f64,
    pub overlap: Vec<String>,
    pub clean: Vec<String>,
    /// Per evaluation example, in input order: best similarity and the
    /// matching reference id.
    pub matches: Vec<Option<(f64, String)>>,
}

/// Flags an example as Overlap when its best similarity to the index
/// reaches `threshold`.
pub fn split_overlap(ids: &[String], embeddings: &Tensor, index: &DetectorIndex, threshold: f64) -> Result<OverlapSplit> {
    if !(threshold > -1.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (-1, 1]")));
    }
    if ids.len() != embeddings.rows() {
        return Err(Error::invalid(format!("{} ids for {} embeddings", ids.len(), embeddings.rows())));
    }
    if index.is_empty() {
        warn!("duplicate index is empty; every example is clean");
    }
    let nearest = index.nearest(embeddings)?;
    let mut split = OverlapSplit {
        threshold,
        overlap: Vec::new(),
        clean: Vec::new(),
        matches: Vec::with_capacity(ids.len()),
    };
    for (id, m) in ids.iter().zip(nearest) {
        if m.is_some_and(|(s, _)| s >= threshold) {
            split.overlap.push(id.clone());
        } else {
            split.clean.push(id.clone());
        }
        split.matches.push(m.map(|(s, j)| (s, index.cache.ids[j].clone())));
    }
    Ok(split)
}

/// Flattened pixels, for the raw-pixel cosine baseline.
pub fn pixel_embeddings(images: &[Image]) -> Result<Tensor> {
    let d = images.first().map_or(0, |i| i.data.len());
    if images.iter().any(|i| i.data.len() != d) {
        return Err(Error::invalid("images differ in size"));
    }
    let mut data = Vec::with_capacity(images.len() * d);
    for im in images {
        data.extend_from_slice(&im.data);
    }
    Tensor::new(&[images.len(), d], data)
}

/// Best recall at precision 1: the threshold sits at the largest score of
/// any negative (just above it), and recall counts positives strictly
/// above that. Returns `(recall, threshold)`.
pub fn recall_at_full_precision(scores: &[f64], positive: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::invalid("no positives"));
    }
    let max_neg = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| !p)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let hits = scores.iter().zip(positive).filter(|(&s, &p)| p && s > max_neg).count();
    let threshold = if max_neg.is_finite() {
        next_up(max_neg)
    } else {
        -1.0 + f64::EPSILON
    };
    Ok((hits as f64 / n_pos as f64, threshold))
}

fn next_up(x: f64) -> f64 {
    if x >= 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}
