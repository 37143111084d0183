//! Training loop: shuffled minibatches, AdamW with warmup + cosine decay,
//! the logit-scale clamp after every step, periodic zero-shot evaluation,
//! and a JSONL report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::EvalSet;
use crate::encoders::KeyValues;
use crate::error::{Error, Result};
use crate::image::{Image, Interpolation};
use crate::model::{bow_targets, bow_vocabulary, BowModel, ClipModel, ModelConfig};
use crate::ndcore::{AdamWConfig, Bound, Graph, OptimizerState, ParamStore, Tensor, Var};
use crate::probe::{accuracy, mean_per_class};
use crate::textproc::{train_bpe, TokenSequence};
use crate::zeroshot::{build_classifier, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Contrastive,
    Bow,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Contrastive => "contrastive",
            Objective::Bow => "bow",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Objective::Contrastive),
            "bow" => Ok(Objective::Bow),
            other => Err(Error::invalid(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Zero-shot evaluation period in steps; 0 disables.
    pub eval_every: usize,
    /// Stop once seen-class zero-shot accuracy reaches this.
    pub stop_at_accuracy: Option<f64>,
    /// When set alongside `stop_at_accuracy`, stopping also requires this
    /// held-out accuracy at the same evaluation.
    pub stop_at_held_out: Option<f64>,
    /// Images are resized up by this many pixels and randomly cropped back.
    pub crop_margin: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 400,
            max_steps: Some(3000),
            base_lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.2,
            seed: 0,
            objective: Objective::Contrastive,
            eval_every: 100,
            stop_at_accuracy: None,
            stop_at_held_out: None,
            crop_margin: 0,
        }
    }
}

impl TrainConfig {
    /// Reads `train.*` keys over the defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let kv = KeyValues(map);
        let d = TrainConfig::default();
        let opt = |key: &str, default: Option<f64>| -> Result<Option<f64>> {
            match kv.get_str(key) {
                None => Ok(default),
                Some("none") => Ok(None),
                Some(_) => kv.get(key, 0.0).map(Some),
            }
        };
        let max_steps = match kv.get_str("train.max_steps") {
            None => d.max_steps,
            Some("none") => None,
            Some(_) => Some(kv.get("train.max_steps", 0usize)?),
        };
        let c = TrainConfig {
            batch_size: kv.get("train.batch_size", d.batch_size)?,
            epochs: kv.get("train.epochs", d.epochs)?,
            max_steps,
            base_lr: kv.get("train.base_lr", d.base_lr)?,
            warmup_steps: kv.get("train.warmup_steps", d.warmup_steps)?,
            weight_decay: kv.get("train.weight_decay", d.weight_decay)?,
            seed: kv.get("train.seed", d.seed)?,
            objective: kv.get("train.objective", d.objective)?,
            eval_every: kv.get("train.eval_every", d.eval_every)?,
            stop_at_accuracy: opt("train.stop_at_accuracy", d.stop_at_accuracy)?,
            stop_at_held_out: opt("train.stop_at_held_out", d.stop_at_held_out)?,
            crop_margin: kv.get("train.crop_margin", d.crop_margin)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be at least 1"));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be non-negative"));
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `n` pairs. Partial final batches
    /// are dropped unless the dataset is smaller than one batch.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = (n / self.batch_size).max(usize::from(n > 0));
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| total.min(m))
    }
}

/// Captioned images held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPairs {
    pub images: Vec<Image>,
    pub captions: Vec<String>,
}

impl TrainingPairs {
    pub fn new(images: Vec<Image>, captions: Vec<String>) -> Result<Self> {
        if images.is_empty() || images.len() != captions.len() {
            return Err(Error::invalid(format!(
                "{} images and {} captions",
                images.len(),
                captions.len()
            )));
        }
        Ok(TrainingPairs { images, captions })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Accuracy on classes seen in training, over all classes.
    pub accuracy: f64,
    pub mean_per_class: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub objective: Objective,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// `exp(log_scale)` after each step's clamp.
    pub logit_scales: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub reached_target_at: Option<usize>,
    /// Fingerprint of the final parameters.
    pub checkpoint: Option<String>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine<'a> {
    Step {
        step: usize,
        loss: f64,
        lr: f64,
        logit_scale: f64,
    },
    Eval(&'a EvalPoint),
    Final {
        objective: Objective,
        steps: usize,
        reached_target_at: Option<usize>,
        checkpoint: &'a Option<String>,
    },
}

impl TrainReport {
    /// One JSON object per step, per evaluation, and a closing summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        for i in 0..self.steps {
            out.push_str(&serde_json::to_string(&ReportLine::Step {
                step: i + 1,
                loss: self.losses[i],
                lr: self.learning_rates[i],
                logit_scale: self.logit_scales[i],
            })?);
            out.push('\n');
            while let Some(e) = evals.next_if(|e| e.step == i + 1) {
                out.push_str(&serde_json::to_string(&ReportLine::Eval(e))?);
                out.push('\n');
            }
        }
        out.push_str(&serde_json::to_string(&ReportLine::Final {
            objective: self.objective,
            steps: self.steps,
            reached_target_at: self.reached_target_at,
            checkpoint: &self.checkpoint,
        })?);
        out.push('\n');
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Trained {
    Clip(ClipModel),
    Bow(BowModel),
}

impl Trained {
    pub fn params(&self) -> &ParamStore {
        match self {
            Trained::Clip(m) => &m.params,
            Trained::Bow(m) => &m.params,
        }
    }

    /// Predicted class per evaluation image using the default template.
    pub fn zero_shot_predictions(&self, class_names: &[String], images: &[Image]) -> Result<Vec<usize>> {
        let template = PromptTemplate::default();
        match self {
            Trained::Clip(m) => {
                let clf = build_classifier(class_names, std::slice::from_ref(&template), m, m.logit_scale())?;
                let e = m.embed_images(images)?;
                Ok(clf.predict_batch(&e)?.argmax_rows())
            }
            Trained::Bow(m) => {
                let prompts: Vec<String> = class_names.iter().map(|c| template.fill(c)).collect();
                Ok(m.prompt_log_likelihoods(images, &prompts)?.argmax_rows())
            }
        }
    }
}

/// Seen and held-out zero-shot accuracy on an evaluation set.
pub fn evaluate(model: &Trained, eval: &EvalSet, step: usize) -> Result<EvalPoint> {
    let preds = model.zero_shot_predictions(&eval.class_names, &eval.images)?;
    let subset = |held: bool| -> (Vec<usize>, Vec<usize>) {
        eval.split(held).into_iter().map(|i| (preds[i], eval.labels[i])).unzip()
    };
    let (sp, sl) = subset(false);
    let (hp, hl) = subset(true);
    Ok(EvalPoint {
        step,
        accuracy: accuracy(&sp, &sl)?,
        mean_per_class: mean_per_class(&sp, &sl)?,
        held_out_accuracy: if hl.is_empty() { None } else { Some(accuracy(&hp, &hl)?) },
    })
}

enum Task {
    Clip { model: ClipModel, tokens: Vec<TokenSequence> },
    Bow { model: BowModel, targets: Tensor },
}

impl Task {
    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Task::Clip { model, .. } => &mut model.params,
            Task::Bow { model, .. } => &mut model.params,
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            Task::Clip { model, .. } => &model.params,
            Task::Bow { model, .. } => &model.params,
        }
    }

    fn loss(&self, g: &mut Graph, p: &Bound, images: &[Image], idx: &[usize]) -> Result<Var> {
        match self {
            Task::Clip { model, tokens } => {
                let seqs: Vec<TokenSequence> = idx.iter().map(|&i| tokens[i].clone()).collect();
                model.loss(g, p, images, &seqs)
            }
            Task::Bow { model, targets } => {
                let t = targets.select_rows(idx);
                model.loss_with_targets(g, p, images, &t)
            }
        }
    }

    fn after_step(&mut self) {
        if let Task::Clip { model, .. } = self {
            model.clamp_logit_scale();
        }
    }

    fn logit_scale(&self) -> f64 {
        match self {
            Task::Clip { model, .. } => model.logit_scale().scale(),
            Task::Bow { .. } => f64::NAN,
        }
    }

    fn into_trained(self) -> Trained {
        match self {
            Task::Clip { model, .. } => Trained::Clip(model),
            Task::Bow { model, .. } => Trained::Bow(model),
        }
    }

    fn snapshot(&self) -> Trained {
        match self {
            Task::Clip { model, .. } => Trained::Clip(model.clone()),
            Task::Bow { model, .. } => Trained::Bow(model.clone()),
        }
    }
}

/// Random square crop from an image enlarged by `margin` pixels.
pub fn random_resized_crop<R: Rng + ?Sized>(img: &Image, margin: usize, rng: &mut R) -> Image {
    if margin == 0 {
        return img.clone();
    }
    let big = img.resize(img.height + margin, img.width + margin, Interpolation::Bilinear);
    let y = rng.random_range(0..=margin);
    let x = rng.random_range(0..=margin);
    big.crop(y, x, img.height, img.width)
}

/// Builds the model for `cfg.objective` and trains it.
///
/// The tokenizer (contrastive) or word vocabulary (bag of words) is fitted
/// on the training captions. Deterministic given `cfg.seed`.
pub fn train(
    data: &TrainingPairs,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
) -> Result<(Trained, TrainReport)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let task = match cfg.objective {
        Objective::Contrastive => {
            let tok = train_bpe(&data.captions, model_cfg.text.vocab_size)?;
            if tok.exhausted {
                info!("caption corpus ran out of merges at vocab size {}", tok.vocab_size());
            }
            let model = ClipModel::new(*model_cfg, tok, cfg.seed)?;
            let tokens = model.tokenize(&data.captions)?;
            Task::Clip { model, tokens }
        }
        Objective::Bow => {
            let vocab = bow_vocabulary(&data.captions);
            let targets = bow_targets(&data.captions, &vocab);
            let model = BowModel::new(*model_cfg, vocab, cfg.seed)?;
            Task::Bow { model, targets }
        }
    };
    run(task, data, cfg, eval)
}

fn run(mut task: Task, data: &TrainingPairs, cfg: &TrainConfig, eval: Option<&EvalSet>) -> Result<(Trained, TrainReport)> {
    let n = data.len();
    let total = cfg.total_steps(n);
    let mut opt_cfg = AdamWConfig::vit(cfg.base_lr, cfg.warmup_steps, total);
    opt_cfg.weight_decay = cfg.weight_decay;
    let mut opt = OptimizerState::new(opt_cfg, task.params());
    // a separate stream for shuffling and augmentation keeps init and data
    // order independent
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut report = TrainReport {
        objective: cfg.objective,
        steps: 0,
        losses: Vec::with_capacity(total),
        learning_rates: Vec::with_capacity(total),
        logit_scales: Vec::with_capacity(total),
        evals: Vec::new(),
        reached_target_at: None,
        checkpoint: None,
    };
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = usize::MAX;
    for step in 0..total {
        if cursor == usize::MAX || cursor + bs > order.len() {
            order = (0..n).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let images: Vec<Image> = idx
            .iter()
            .map(|&i| random_resized_crop(&data.images[i], cfg.crop_margin, &mut rng))
            .collect();
        let mut g = Graph::new();
        let p = task.params().bind(&mut g);
        let loss = task.loss(&mut g, &p, &images, idx)?;
        let value = g.value(loss).item();
        let lr = crate::ndcore::cosine_lr(opt.step + 1, &opt.config);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: step + 1,
                lr,
                logit_scale: task.logit_scale(),
            });
        }
        let grads = g.backward(loss)?;
        let grads = p.collect_grads(&grads, task.params());
        drop(g);
        opt.adamw_step(task.params_mut(), &grads)?;
        task.after_step();
        report.losses.push(value);
        report.learning_rates.push(lr);
        report.logit_scales.push(task.logit_scale());
        report.steps = step + 1;
        if let Some(ev) = eval.filter(|_| cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == total)) {
            let point = evaluate(&task.snapshot(), ev, step + 1)?;
            info!(
                "step {} loss {:.4} zero-shot {:.3} held-out {:?}",
                step + 1,
                value,
                point.accuracy,
                point.held_out_accuracy
            );
            let hit = cfg.stop_at_accuracy.is_some_and(|t| point.accuracy >= t);
            if hit && report.reached_target_at.is_none() {
                report.reached_target_at = Some(step + 1);
            }
            let held_ok = cfg
                .stop_at_held_out
                .is_none_or(|t| point.held_out_accuracy.is_some_and(|h| h >= t));
            report.evals.push(point);
            if hit && held_ok {
                break;
            }
        }
    }
    let trained = task.into_trained();
    report.checkpoint = Some(match &trained {
        Trained::Clip(m) => m.fingerprint()?,
        Trained::Bow(m) => m.fingerprint()?,
    });
    Ok((trained, report))
}

/// Steps each objective needed to reach the target accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveOutcome {
    pub objective: Objective,
    /// `None` when the target was not reached within the budget.
    pub steps_to_target: Option<usize>,
    pub final_accuracy: Option<f64>,
    pub steps_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub target_accuracy: f64,
    /// Fastest first; unreached last, in input order.
    pub outcomes: Vec<ObjectiveOutcome>,
}

/// Trains each config (identical apart from the objective) until the
/// seen-class zero-shot accuracy reaches `target` or the budget runs out.
pub fn compare_objectives(
    data: &TrainingPairs,
    model_cfg: &ModelConfig,
    configs: &[TrainConfig],
    eval: &EvalSet,
    target: f64,
) -> Result<ComparisonReport> {
    if configs.len() < 2 {
        return Err(Error::invalid("comparison needs at least two configs"));
    }
    for c in &configs[1..] {
        let same = TrainConfig {
            objective: configs[0].objective,
            ..*c
        };
        if same != configs[0] {
            return Err(Error::invalid("configs may differ only in objective"));
        }
    }
    let mut outcomes = Vec::new();
    for c in configs {
        let c = TrainConfig {
            stop_at_accuracy: Some(target),
            ..*c
        };
        let outcome = if c.max_steps == Some(0) {
            ObjectiveOutcome {
                objective: c.objective,
                steps_to_target: None,
                final_accuracy: None,
                steps_run: 0,
            }
        } else {
            let (_, r) = train(data, model_cfg, &c, Some(eval))?;
            ObjectiveOutcome {
                objective: c.objective,
                steps_to_target: r.reached_target_at,
                final_accuracy: r.evals.last().map(|e| e.accuracy),
                steps_run: r.steps,
            }
        };
        outcomes.push(outcome);
    }
    outcomes.sort_by_key(|o| o.steps_to_target.unwrap_or(usize::MAX));
    Ok(ComparisonReport {
        target_accuracy: target,
        outcomes,
    })
}
