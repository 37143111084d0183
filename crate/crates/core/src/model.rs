//! The assembled models: the contrastive dual encoder and the
//! bag-of-words predictive baseline, with directory persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::contrastive::{
    bow_loss_var, clamp_logit_scale, contrastive_loss_var, project_normalize_var, LogitScale,
};
use crate::encoders::{parse_key_values, ImageEncoder, ImageEncoderConfig, KeyValues, TextEncoder, TextEncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::ndcore::checkpoint::{load_params_file, save_params, save_params_file};
use crate::ndcore::{sigmoid, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::textproc::{encode, MergeTable, TokenSequence};

/// Rows embedded per graph during inference.
const INFER_CHUNK: usize = 128;

/// Shapes of both towers and the joint space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    /// Desk scale: 2-layer, 64-wide towers over 32×32 images.
    fn default() -> Self {
        ModelConfig {
            text: TextEncoderConfig {
                layers: 2,
                width: 64,
                heads: 4,
                context_length: 16,
                // desk-scale caption corpora run out of merges well
                // below this
                vocab_size: 300,
            },
            image: ImageEncoderConfig {
                image_size: 32,
                patch_size: 8,
                layers: 2,
                width: 64,
                heads: 4,
                pre_norm: true,
            },
            embed_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Reads `text.*`, `image.*` and `embed_dim` keys; unspecified keys keep
    /// their defaults. `text.vocab_size` is the tokenizer training target.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let kv = KeyValues(map);
        let d = ModelConfig::default();
        let c = ModelConfig {
            text: TextEncoderConfig {
                layers: kv.get("text.layers", d.text.layers)?,
                width: kv.get("text.width", d.text.width)?,
                heads: kv.get("text.heads", d.text.heads)?,
                context_length: kv.get("text.context_length", d.text.context_length)?,
                vocab_size: kv.get("text.vocab_size", d.text.vocab_size)?,
            },
            image: ImageEncoderConfig {
                image_size: kv.get("image.image_size", d.image.image_size)?,
                patch_size: kv.get("image.patch_size", d.image.patch_size)?,
                layers: kv.get("image.layers", d.image.layers)?,
                width: kv.get("image.width", d.image.width)?,
                heads: kv.get("image.heads", d.image.heads)?,
                pre_norm: kv.get("image.pre_norm", d.image.pre_norm)?,
            },
            embed_dim: kv.get("embed_dim", d.embed_dim)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.image.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let (t, i) = (&self.text, &self.image);
        format!(
            "embed_dim = {}\ntext.layers = {}\ntext.width = {}\ntext.heads = {}\n\
             text.context_length = {}\ntext.vocab_size = {}\nimage.image_size = {}\n\
             image.patch_size = {}\nimage.layers = {}\nimage.width = {}\nimage.heads = {}\n\
             image.pre_norm = {}\n",
            self.embed_dim,
            t.layers,
            t.width,
            t.heads,
            t.context_length,
            t.vocab_size,
            i.image_size,
            i.patch_size,
            i.layers,
            i.width,
            i.heads,
            i.pre_norm
        )
    }
}

/// Image tower, text tower, the two linear projections and the learned
/// logit scale.
#[derive(Debug, Clone)]
pub struct ClipModel {
    pub config: ModelConfig,
    pub tokenizer: MergeTable,
    pub params: ParamStore,
    text: TextEncoder,
    image: ImageEncoder,
    w_image: ParamId,
    w_text: ParamId,
    logit_scale: ParamId,
}

/// Trainable logit scale parameter name; excluded from decay.
pub const LOGIT_SCALE: &str = "logit_scale";

impl ClipModel {
    /// Fresh weights; the text vocabulary follows the tokenizer.
    pub fn new(mut config: ModelConfig, tokenizer: MergeTable, seed: u64) -> Result<Self> {
        config.text.vocab_size = tokenizer.vocab_size();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let image = ImageEncoder::new(&mut params, "visual", config.image, &mut rng)?;
        let text = TextEncoder::new(&mut params, config.text, &mut rng)?;
        let w_image = params.add(
            "proj.image",
            Tensor::randn(&[config.image.width, config.embed_dim], INIT_STD, &mut rng),
            true,
        );
        let w_text = params.add(
            "proj.text",
            Tensor::randn(&[config.text.width, config.embed_dim], INIT_STD, &mut rng),
            true,
        );
        let logit_scale = params.add(
            LOGIT_SCALE,
            Tensor::scalar(LogitScale::default().log_scale),
            false,
        );
        Ok(ClipModel {
            config,
            tokenizer,
            params,
            text,
            image,
            w_image,
            w_text,
            logit_scale,
        })
    }

    pub fn logit_scale(&self) -> LogitScale {
        LogitScale::new(self.params.value(self.logit_scale).item())
    }

    pub fn set_log_scale(&mut self, log_scale: f64) {
        self.params.get_mut(self.logit_scale).value = Tensor::scalar(log_scale);
    }

    /// Applies the upper bound on the logit scale in place.
    pub fn clamp_logit_scale(&mut self) {
        let s = self.logit_scale().log_scale;
        self.set_log_scale(clamp_logit_scale(s));
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.logit_scale
    }

    pub fn tokenize<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<TokenSequence>> {
        texts
            .iter()
            .map(|t| encode(t.as_ref(), &self.tokenizer, self.config.text.context_length))
            .collect()
    }

    /// Unit-norm image embeddings on the graph.
    pub fn image_embeddings(&self, g: &mut Graph, p: &Bound, images: &[Image]) -> Result<Var> {
        let f = self.image.forward(g, p, images)?;
        project_normalize_var(g, f, p[self.w_image])
    }

    /// Unit-norm text embeddings on the graph.
    pub fn text_embeddings(&self, g: &mut Graph, p: &Bound, seqs: &[TokenSequence]) -> Result<Var> {
        let f = self.text.forward(g, p, seqs)?;
        project_normalize_var(g, f, p[self.w_text])
    }

    /// Symmetric contrastive loss over a batch of matched pairs.
    pub fn loss(&self, g: &mut Graph, p: &Bound, images: &[Image], seqs: &[TokenSequence]) -> Result<Var> {
        if images.len() != seqs.len() {
            return Err(Error::invalid(format!(
                "{} images but {} captions in batch",
                images.len(),
                seqs.len()
            )));
        }
        let fi = self.image.forward(g, p, images)?;
        let ft = self.text.forward(g, p, seqs)?;
        let ei = g.matmul(fi, p[self.w_image])?;
        let et = g.matmul(ft, p[self.w_text])?;
        contrastive_loss_var(g, ei, et, p[self.logit_scale])
    }

    pub fn embed_images(&self, images: &[Image]) -> Result<Tensor> {
        infer_chunks(images, |chunk| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let e = self.image_embeddings(&mut g, &p, chunk)?;
            Ok(g.value(e).clone())
        })
    }

    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor> {
        let seqs = self.tokenize(texts)?;
        infer_chunks(&seqs, |chunk| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let e = self.text_embeddings(&mut g, &p, chunk)?;
            Ok(g.value(e).clone())
        })
    }

    /// Hex sha256 over config, tokenizer and parameter payload.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.config.to_key_values().as_bytes());
        h.update(self.tokenizer.to_text().as_bytes());
        let mut buf = Vec::new();
        save_params(&mut buf, &self.params)?;
        h.update(&buf);
        Ok(hex::encode(h.finalize()))
    }

    /// Writes `model.cfg`, `tokenizer.bpe` and `params.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("model.cfg"), self.config.to_key_values())?;
        self.tokenizer.save(&dir.join("tokenizer.bpe"))?;
        save_params_file(&dir.join("params.ckpt"), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::from_map(&parse_key_values(&fs::read_to_string(dir.join("model.cfg"))?)?)?;
        let tokenizer = MergeTable::load(&dir.join("tokenizer.bpe"))?;
        let mut model = ClipModel::new(config, tokenizer, 0)?;
        model.params.load_from(&load_params_file(&dir.join("params.ckpt"))?)?;
        Ok(model)
    }
}

pub(crate) fn infer_chunks<T>(items: &[T], mut f: impl FnMut(&[T]) -> Result<Tensor>) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::invalid("nothing to embed"));
    }
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in items.chunks(INFER_CHUNK) {
        let t = f(chunk)?;
        width = t.last_dim();
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), width], data)
}

/// Lower-cased alphanumeric words of a caption.
pub fn bow_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Sorted distinct words over a caption corpus.
pub fn bow_vocabulary<S: AsRef<str>>(captions: &[S]) -> Vec<String> {
    let mut words: Vec<String> = captions.iter().flat_map(|c| bow_words(c.as_ref())).collect();
    words.sort();
    words.dedup();
    words
}

/// Binary presence matrix `[captions, vocab]`; out-of-vocabulary words are
/// dropped.
pub fn bow_targets<S: AsRef<str>>(captions: &[S], vocab: &[String]) -> Tensor {
    let mut t = Tensor::zeros(&[captions.len(), vocab.len()]);
    let v = vocab.len();
    for (i, c) in captions.iter().enumerate() {
        for w in bow_words(c.as_ref()) {
            if let Ok(j) = vocab.binary_search(&w) {
                t.data_mut()[i * v + j] = 1.0;
            }
        }
    }
    t
}

/// Image tower with a linear head predicting the caption's bag of words.
#[derive(Debug, Clone)]
pub struct BowModel {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub params: ParamStore,
    image: ImageEncoder,
    head_w: ParamId,
    head_b: ParamId,
}

impl BowModel {
    pub fn new(config: ModelConfig, vocab: Vec<String>, seed: u64) -> Result<Self> {
        config.image.validate()?;
        if vocab.is_empty() {
            return Err(Error::invalid("empty bag-of-words vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let image = ImageEncoder::new(&mut params, "visual", config.image, &mut rng)?;
        let head_w = params.add(
            "bow.weight",
            Tensor::randn(&[config.image.width, vocab.len()], INIT_STD, &mut rng),
            true,
        );
        let head_b = params.add("bow.bias", Tensor::zeros(&[vocab.len()]), false);
        Ok(BowModel {
            config,
            vocab,
            params,
            image,
            head_w,
            head_b,
        })
    }

    /// Hex sha256 over config, vocabulary and parameter payload.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.config.to_key_values().as_bytes());
        h.update(self.vocab.join("\n").as_bytes());
        let mut buf = Vec::new();
        save_params(&mut buf, &self.params)?;
        h.update(&buf);
        Ok(hex::encode(h.finalize()))
    }

    /// Writes `model.cfg`, `vocab.txt` and `params.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("model.cfg"), self.config.to_key_values())?;
        fs::write(dir.join("vocab.txt"), self.vocab.join("\n") + "\n")?;
        save_params_file(&dir.join("params.ckpt"), &self.params)
    }

    pub fn loss(&self, g: &mut Graph, p: &Bound, images: &[Image], captions: &[String]) -> Result<Var> {
        let f = self.image.forward(g, p, images)?;
        let targets = bow_targets(captions, &self.vocab);
        bow_loss_var(g, f, p[self.head_w], p[self.head_b], &targets)
    }

    /// As [`BowModel::loss`] with a precomputed presence matrix.
    pub fn loss_with_targets(&self, g: &mut Graph, p: &Bound, images: &[Image], targets: &Tensor) -> Result<Var> {
        let f = self.image.forward(g, p, images)?;
        bow_loss_var(g, f, p[self.head_w], p[self.head_b], targets)
    }

    /// Word logits `[images, vocab]`.
    pub fn word_logits(&self, images: &[Image]) -> Result<Tensor> {
        infer_chunks(images, |chunk| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let f = self.image.forward(&mut g, &p, chunk)?;
            let z = g.matmul(f, p[self.head_w])?;
            let z = g.add_tiled(z, p[self.head_b])?;
            Ok(g.value(z).clone())
        })
    }

    /// Bernoulli log-likelihood of each prompt's bag of words under each
    /// image's predicted word probabilities, `[images, prompts]`.
    pub fn prompt_log_likelihoods<S: AsRef<str>>(&self, images: &[Image], prompts: &[S]) -> Result<Tensor> {
        let z = self.word_logits(images)?;
        let b = bow_targets(prompts, &self.vocab);
        let v = self.vocab.len();
        let mut out = Tensor::zeros(&[images.len(), prompts.len()]);
        for i in 0..images.len() {
            let logp: Vec<(f64, f64)> = z
                .row(i)
                .iter()
                .map(|&x| {
                    let s = sigmoid(x).clamp(1e-300, 1.0);
                    let ns = sigmoid(-x).clamp(1e-300, 1.0);
                    (s.ln(), ns.ln())
                })
                .collect();
            for c in 0..prompts.len() {
                let row = &b.data()[c * v..(c + 1) * v];
                out.data_mut()[i * prompts.len() + c] = row
                    .iter()
                    .zip(&logp)
                    .map(|(&y, &(lp, ln))| if y == 1.0 { lp } else { ln })
                    .sum();
            }
        }
        Ok(out)
    }
}
