//! `deskclip` command-line interface.
//!
//! Every command prints one pretty JSON report (to stdout, or to `--out`
//! when that names a report file). Commands that produce artifacts treat
//! `--out` as a directory and also write `report.json` there.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use deskclip::analysis::{
    effective_robustness, fit_line, overlap_report, plot_csv, OverlapExample, RobustnessFit, RobustnessPoint,
    DEFAULT_CONFIDENCE, DEFAULT_RESAMPLES,
};
use deskclip::datakit::{
    build_pairs, gen_eval_set, gen_synthetic, parse_queries, read_jsonl, write_jsonl, EmbeddingCache, PairRecord,
    SyntheticSpec, DEFAULT_PER_QUERY_CAP,
};
use deskclip::dedup::{split_overlap, train_detector, Detector, DetectorConfig, DetectorIndex, OverlapSplit};
use deskclip::encoders::KeyValues;
use deskclip::model::{ClipModel, ModelConfig};
use deskclip::probe::{fit_logreg, metric, sweep_lambda, FeatureSet, MetricKind};
use deskclip::trainer::{compare_objectives, train, Objective, TrainConfig, Trained, TrainingPairs};
use deskclip::zeroshot::{build_classifier, evaluate_zeroshot, load_templates, PromptTemplate, ZeroShotClassifier};

use io::{load_eval_set, load_records, read_config, read_lines, record_id, UsageError};

#[derive(Parser)]
#[command(name = "deskclip", version, about = "Desk-scale contrastive language-image pretraining")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report file, or output directory for commands that write artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, filter, embed or featurize datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train a model on `<data>/train.jsonl` into the `--out` directory.
    Train(TrainArgs),
    /// Build or evaluate zero-shot classifiers.
    #[command(subcommand)]
    Zeroshot(ZeroshotCmd),
    /// Linear probes on saved features.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Logit-space baseline fits and effective robustness.
    #[command(subcommand)]
    Robustness(RobustnessCmd),
    /// Near-duplicate detection and contamination statistics.
    #[command(subcommand, alias = "dedup")]
    Overlap(OverlapCmd),
    /// Steps each objective needs to reach a zero-shot accuracy target.
    CompareObjectives(CompareArgs),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Synthetic captioned shapes: `train.jsonl`, `eval.jsonl`, `classes.txt`.
    Gen(GenArgs),
    /// Substring query filtering with a per-query cap.
    Build(BuildArgs),
    /// Append image or text embeddings to a cache file.
    Embed(EmbedArgs),
    /// Labelled image features for linear probes.
    Features(FeaturesArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    per_combo: Option<usize>,
    #[arg(long)]
    eval_per_class: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct BuildArgs {
    /// Candidate pair records (JSONL).
    #[arg(long)]
    records: PathBuf,
    /// One query per line.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PER_QUERY_CAP)]
    cap: usize,
    /// Where to write the admitted records.
    #[arg(long)]
    pairs: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Embed captions instead of images.
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Records whose `meta.label` holds a class index.
    #[arg(long)]
    data: PathBuf,
    /// Class names, one per line.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    features: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with `train.jsonl` and optionally `eval.jsonl`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum ZeroshotCmd {
    /// Embed prompt ensembles for every class into a classifier file.
    Build {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        /// Template file; the default single template when omitted.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        classifier: PathBuf,
    },
    /// Score a classifier on labelled records.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-example `{id, label, predicted, correct}` lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Fit at one λ.
    Fit {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value = "accuracy")]
        metric: MetricKind,
    },
    /// Tune λ on the validation split, refit on train+val, score test.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "accuracy")]
        metric: MetricKind,
    },
}

#[derive(Subcommand)]
enum RobustnessCmd {
    /// Fit `logit(shift) ~ logit(in_dist)` with bootstrap intervals.
    Fit {
        /// JSON array or JSONL of `{name, in_dist, shift}`.
        #[arg(long)]
        points: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        /// Also write plot data as CSV here.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Effective robustness of each point against a baseline.
    Report {
        #[arg(long)]
        points: PathBuf,
        /// A report from `robustness fit`; the `y = x` line when omitted.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OverlapCmd {
    /// Train a duplicate detector on reference images and index them.
    #[command(alias = "build-index")]
    Index {
        #[arg(long)]
        references: PathBuf,
    },
    /// Partition evaluation records into Overlap and Clean.
    Split {
        /// Directory written by `overlap index`.
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: f64,
    },
    /// Accuracy on All / Overlap / Clean with the binomial test.
    Report {
        #[arg(long)]
        split: PathBuf,
        /// Lines with `{id, correct}`, e.g. from `zeroshot eval`.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
        confidence: f64,
    },
}

#[derive(Args)]
struct CompareArgs {
    /// Directory with `train.jsonl` and `eval.jsonl`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    target: f64,
}

struct Ctx {
    seed: Option<u64>,
    config: std::collections::BTreeMap<String, String>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out_dir(&self) -> Result<&Path> {
        let dir = self
            .out
            .as_deref()
            .ok_or_else(|| UsageError("this command needs --out <dir>".into()))?;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Prints the report, or writes it to `--out`.
    fn emit(&self, report: &impl Serialize) -> Result<()> {
        let text = to_json(report)?;
        match &self.out {
            Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
            None => print!("{text}"),
        }
        Ok(())
    }

    /// Writes `report.json` into the output directory and prints it.
    fn emit_in_dir(&self, dir: &Path, report: &impl Serialize) -> Result<()> {
        let text = to_json(report)?;
        std::fs::write(dir.join("report.json"), &text)?;
        print!("{text}");
        Ok(())
    }
}

fn to_json(report: &impl Serialize) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<deskclip::Error>() {
            return match err {
                deskclip::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                err if err.is_validation() => 2,
                _ => 1,
            };
        }
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound { 2 } else { 1 };
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => read_config(p)?,
        None => Default::default(),
    };
    let ctx = Ctx {
        seed: cli.seed,
        config,
        out: cli.out,
    };
    match cli.command {
        Command::Dataset(DatasetCmd::Gen(a)) => dataset_gen(&ctx, a),
        Command::Dataset(DatasetCmd::Build(a)) => dataset_build(&ctx, a),
        Command::Dataset(DatasetCmd::Embed(a)) => dataset_embed(&ctx, a),
        Command::Dataset(DatasetCmd::Features(a)) => dataset_features(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Zeroshot(c) => zeroshot_cmd(&ctx, c),
        Command::Probe(c) => probe_cmd(&ctx, c),
        Command::Robustness(c) => robustness_cmd(&ctx, c),
        Command::Overlap(c) => overlap_cmd(&ctx, c),
        Command::CompareObjectives(a) => compare_cmd(&ctx, a),
    }
}

fn dataset_gen(ctx: &Ctx, a: GenArgs) -> Result<()> {
    let kv = KeyValues(&ctx.config);
    let d = SyntheticSpec::default();
    let seed = ctx.seed.unwrap_or(kv.get("data.seed", d.seed)?);
    let spec = SyntheticSpec {
        per_combo: a.per_combo.unwrap_or(kv.get("data.per_combo", d.per_combo)?),
        image_size: a.image_size.unwrap_or(kv.get("data.image_size", d.image_size)?),
        seed,
        ..d
    };
    let per_class = a.eval_per_class.unwrap_or(kv.get("data.eval_per_class", 20usize)?);
    let dir = ctx.out_dir()?;

    let samples = gen_synthetic(&spec)?;
    let mut train_rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut r = PairRecord::inline(&s.image, s.caption.clone())?;
        let mut meta = serde_json::to_value(&s.meta)?;
        meta["id"] = json!(format!("train-{i:05}"));
        r.meta = Some(meta);
        train_rows.push(r);
    }
    write_jsonl(&dir.join("train.jsonl"), &train_rows)?;

    // the eval seed is derived so train and eval images never coincide
    let eval = gen_eval_set(&spec, per_class, seed.wrapping_add(1))?;
    let mut eval_rows = Vec::with_capacity(eval.images.len());
    for (i, (img, &label)) in eval.images.iter().zip(&eval.labels).enumerate() {
        let name = &eval.class_names[label];
        let mut r = PairRecord::inline(img, PromptTemplate::default().fill(name))?;
        r.meta = Some(json!({
            "id": format!("eval-{i:05}"),
            "label": label,
            "class": name,
            "held_out": eval.held_out[label],
        }));
        eval_rows.push(r);
    }
    write_jsonl(&dir.join("eval.jsonl"), &eval_rows)?;
    std::fs::write(dir.join("classes.txt"), eval.class_names.join("\n") + "\n")?;

    let held: Vec<&String> = eval.class_names.iter().zip(&eval.held_out).filter(|p| *p.1).map(|p| p.0).collect();
    ctx.emit_in_dir(
        dir,
        &json!({
            "seed": seed,
            "train_pairs": train_rows.len(),
            "eval_examples": eval_rows.len(),
            "image_size": spec.image_size,
            "classes": eval.class_names,
            "held_out_classes": held,
        }),
    )
}

fn dataset_build(ctx: &Ctx, a: BuildArgs) -> Result<()> {
    let records: Vec<PairRecord> = read_jsonl(&a.records).with_context(|| format!("reading {}", a.records.display()))?;
    let queries = parse_queries(&std::fs::read_to_string(&a.queries).with_context(|| format!("reading {}", a.queries.display()))?);
    let (kept, manifest) = build_pairs(&records, &queries, a.cap)?;
    write_jsonl(&a.pairs, &kept)?;
    ctx.emit(&manifest)
}

fn dataset_embed(ctx: &Ctx, a: EmbedArgs) -> Result<()> {
    let model = ClipModel::load(&a.checkpoint).with_context(|| format!("loading {}", (&a.checkpoint).display()))?;
    let recs = load_records(&a.data)?;
    let ids: Vec<String> = recs.iter().enumerate().map(|(i, r)| record_id(&r.record, i)).collect();
    let embeddings = if a.text {
        let texts: Vec<&str> = recs.iter().map(|r| r.record.text.as_str()).collect();
        model.embed_texts(&texts)?
    } else {
        let images: Vec<_> = recs.into_iter().map(|r| r.image).collect();
        model.embed_images(&images)?
    };
    let fingerprint = model.fingerprint()?;
    let rows = EmbeddingCache::new(ids, embeddings, fingerprint.clone())?;
    let total = EmbeddingCache::append_to_file(&a.cache, &rows)?;
    ctx.emit(&json!({
        "tower": if a.text { "text" } else { "image" },
        "appended": rows.len(),
        "rows": total.len(),
        "dim": rows.embeddings.last_dim(),
        "fingerprint": fingerprint,
    }))
}

fn dataset_features(ctx: &Ctx, a: FeaturesArgs) -> Result<()> {
    let model = ClipModel::load(&a.checkpoint).with_context(|| format!("loading {}", (&a.checkpoint).display()))?;
    let names = read_lines(&a.classes)?;
    let recs = load_records(&a.data)?;
    let mut labels = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        let label = r
            .record
            .meta
            .as_ref()
            .and_then(|m| m.get("label"))
            .and_then(|l| l.as_u64())
            .ok_or_else(|| UsageError(format!("record {} has no integer meta.label", i + 1)))?;
        labels.push(label as usize);
    }
    let images: Vec<_> = recs.into_iter().map(|r| r.image).collect();
    let set = FeatureSet::new(model.embed_images(&images)?, labels, names)?;
    set.save(&a.features)?;
    ctx.emit(&json!({
        "n": set.len(),
        "dim": set.x.last_dim(),
        "classes": set.label_names.len(),
        "fingerprint": model.fingerprint()?,
    }))
}

fn train_config(ctx: &Ctx) -> Result<(ModelConfig, TrainConfig)> {
    let model_cfg = ModelConfig::from_map(&ctx.config)?;
    let mut cfg = TrainConfig::from_map(&ctx.config)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    Ok((model_cfg, cfg))
}

fn load_training(dir: &Path) -> Result<TrainingPairs> {
    let recs = load_records(&dir.join("train.jsonl"))?;
    let (images, captions) = recs.into_iter().map(|r| (r.image, r.record.text)).unzip();
    Ok(TrainingPairs::new(images, captions)?)
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let (model_cfg, cfg) = train_config(ctx)?;
    let data = load_training(&a.data)?;
    let eval_path = a.data.join("eval.jsonl");
    let eval = if eval_path.exists() { Some(load_eval_set(&eval_path)?) } else { None };
    let dir = ctx.out_dir()?;

    let (model, report) = train(&data, &model_cfg, &cfg, eval.as_ref().map(|e| &e.set))?;
    let fingerprint = match &model {
        Trained::Clip(m) => {
            m.save(dir)?;
            m.fingerprint()?
        }
        Trained::Bow(m) => {
            m.save(dir)?;
            m.fingerprint()?
        }
    };
    std::fs::write(dir.join("report.jsonl"), report.to_jsonl()?)?;
    ctx.emit_in_dir(
        dir,
        &json!({
            "objective": report.objective,
            "steps": report.steps,
            "final_loss": report.losses.last(),
            "final_logit_scale": report.logit_scales.last(),
            "last_eval": report.evals.last(),
            "reached_target_at": report.reached_target_at,
            "train_config": cfg,
            "fingerprint": fingerprint,
        }),
    )
}

fn zeroshot_cmd(ctx: &Ctx, c: ZeroshotCmd) -> Result<()> {
    match c {
        ZeroshotCmd::Build {
            checkpoint,
            classes,
            templates,
            classifier,
        } => {
            let model = ClipModel::load(&checkpoint).with_context(|| format!("loading {}", (&checkpoint).display()))?;
            let names = read_lines(&classes)?;
            let templates = match templates {
                Some(p) => load_templates(&p)?,
                None => vec![PromptTemplate::default()],
            };
            let clf = build_classifier(&names, &templates, &model, model.logit_scale())?;
            clf.save(&classifier)?;
            ctx.emit(&json!({
                "classes": clf.class_names,
                "templates": templates.iter().map(PromptTemplate::pattern).collect::<Vec<_>>(),
                "dim": clf.weights.last_dim(),
                "logit_scale": clf.logit_scale.scale(),
                "fingerprint": model.fingerprint()?,
            }))
        }
        ZeroshotCmd::Eval {
            checkpoint,
            classifier,
            data,
            predictions,
        } => {
            let model = ClipModel::load(&checkpoint).with_context(|| format!("loading {}", (&checkpoint).display()))?;
            let clf = ZeroShotClassifier::load(&classifier).with_context(|| format!("loading {}", (&classifier).display()))?;
            let eval = load_eval_set(&data)?;
            if eval.set.class_names.len() > clf.classes() {
                return Err(UsageError("evaluation labels exceed the classifier's classes".into()).into());
            }
            let emb = model.embed_images(&eval.set.images)?;
            let r = evaluate_zeroshot(&clf, &emb, &eval.set.labels)?;
            if let Some(path) = predictions {
                let rows: Vec<_> = eval
                    .ids
                    .iter()
                    .zip(&eval.set.labels)
                    .zip(&r.predictions)
                    .map(|((id, &label), &pred)| json!({"id": id, "label": label, "predicted": pred, "correct": label == pred}))
                    .collect();
                write_jsonl(&path, &rows)?;
            }
            ctx.emit(&json!({
                "n": r.n,
                "accuracy": r.accuracy,
                "mean_per_class": r.mean_per_class,
                "classes": clf.class_names,
            }))
        }
    }
}

fn probe_cmd(ctx: &Ctx, c: ProbeCmd) -> Result<()> {
    match c {
        ProbeCmd::Fit {
            train,
            lambda,
            test,
            metric: kind,
        } => {
            let tr = FeatureSet::load(&train).with_context(|| format!("loading {}", (&train).display()))?;
            let m = fit_logreg(&tr.x, &tr.labels, lambda)?;
            let test_score = match test {
                Some(p) => {
                    let te = FeatureSet::load(&p).with_context(|| format!("loading {}", (&p).display()))?;
                    if m.classes() != te.label_names.len() {
                        return Err(UsageError("train and test label sets differ".into()).into());
                    }
                    let probs = m.predict_proba(&te.x)?;
                    Some(metric(kind, probs.data(), m.classes(), &te.labels)?)
                }
                None => None,
            };
            ctx.emit(&json!({
                "lambda": lambda,
                "metric": kind,
                "objective": m.objective(&tr.x, &tr.labels)?,
                "iterations": m.iterations,
                "converged": m.converged,
                "test_score": test_score,
            }))
        }
        ProbeCmd::Sweep {
            train,
            val,
            test,
            metric: kind,
        } => {
            let r = sweep_lambda(&FeatureSet::load(&train).with_context(|| format!("loading {}", (&train).display()))?, &FeatureSet::load(&val).with_context(|| format!("loading {}", (&val).display()))?, &FeatureSet::load(&test).with_context(|| format!("loading {}", (&test).display()))?, kind)?;
            ctx.emit(&json!({"metric": kind, "sweep": r}))
        }
    }
}

fn robustness_cmd(ctx: &Ctx, c: RobustnessCmd) -> Result<()> {
    match c {
        RobustnessCmd::Fit { points, resamples, plot } => {
            let pts: Vec<RobustnessPoint> = io::read_json_rows(&points)?;
            let fit = fit_line(&pts, resamples, ctx.seed.unwrap_or(0))?;
            if let Some(p) = plot {
                std::fs::write(&p, plot_csv(&pts, &fit, 50)?)?;
            }
            ctx.emit(&fit)
        }
        RobustnessCmd::Report { points, baseline } => {
            let pts: Vec<RobustnessPoint> = io::read_json_rows(&points)?;
            let base = match &baseline {
                Some(p) => serde_json::from_str::<RobustnessFit>(&std::fs::read_to_string(p)?)?,
                None => RobustnessFit::ideal(),
            };
            let rows = pts
                .iter()
                .map(|p| {
                    Ok(json!({
                        "name": p.name,
                        "in_dist": p.in_dist,
                        "shift": p.shift,
                        "predicted_shift": base.predict(p.in_dist)?,
                        "effective_robustness": effective_robustness(p, &base)?,
                    }))
                })
                .collect::<deskclip::Result<Vec<_>>>()?;
            ctx.emit(&json!({
                "baseline": {"slope": base.slope, "intercept": base.intercept, "ideal": baseline.is_none()},
                "points": rows,
            }))
        }
    }
}

fn detector_config(ctx: &Ctx) -> Result<DetectorConfig> {
    let kv = KeyValues(&ctx.config);
    let d = DetectorConfig::default();
    Ok(DetectorConfig {
        steps: kv.get("detector.steps", d.steps)?,
        batch_size: kv.get("detector.batch_size", d.batch_size)?,
        base_lr: kv.get("detector.base_lr", d.base_lr)?,
        warmup_steps: kv.get("detector.warmup_steps", d.warmup_steps)?,
        embed_dim: kv.get("detector.embed_dim", d.embed_dim)?,
        seed: ctx.seed.unwrap_or(kv.get("detector.seed", d.seed)?),
        ..d
    })
}

fn overlap_cmd(ctx: &Ctx, c: OverlapCmd) -> Result<()> {
    match c {
        OverlapCmd::Index { references } => {
            let cfg = detector_config(ctx)?;
            let recs = load_records(&references)?;
            let ids: Vec<String> = recs.iter().enumerate().map(|(i, r)| record_id(&r.record, i)).collect();
            let images: Vec<_> = recs.into_iter().map(|r| r.image).collect();
            let dir = ctx.out_dir()?;
            let (det, rep) = train_detector(&images, &cfg)?;
            det.save(dir)?;
            let index = DetectorIndex::build(&det, ids, &images)?;
            index.save(&dir.join("index.cache"))?;
            ctx.emit_in_dir(
                dir,
                &json!({
                    "references": index.len(),
                    "steps": cfg.steps,
                    "final_loss": rep.losses.last(),
                    "proxy_accuracy": det.proxy_accuracy(&images, cfg.batch_size.min(images.len()), cfg.seed)?,
                    "fingerprint": rep.fingerprint,
                }),
            )
        }
        OverlapCmd::Split {
            detector,
            data,
            threshold,
        } => {
            let det = Detector::load(&detector).with_context(|| format!("loading {}", (&detector).display()))?;
            let index = DetectorIndex::load(&detector.join("index.cache")).with_context(|| format!("loading {}", (&detector.join("index.cache")).display()))?;
            if index.cache.fingerprint != det.fingerprint()? {
                return Err(UsageError("index was built by a different detector".into()).into());
            }
            let recs = load_records(&data)?;
            let ids: Vec<String> = recs.iter().enumerate().map(|(i, r)| record_id(&r.record, i)).collect();
            let images: Vec<_> = recs.into_iter().map(|r| r.image).collect();
            let split = split_overlap(&ids, &det.embed(&images)?, &index, threshold)?;
            ctx.emit(&split)
        }
        OverlapCmd::Report {
            split,
            predictions,
            confidence,
        } => {
            let split: OverlapSplit = serde_json::from_str(&std::fs::read_to_string(&split)?)?;
            let overlap: std::collections::BTreeSet<&str> = split.overlap.iter().map(String::as_str).collect();
            let preds: Vec<serde_json::Value> = read_jsonl(&predictions)?;
            let mut examples = Vec::with_capacity(preds.len());
            for (i, p) in preds.iter().enumerate() {
                let (Some(id), Some(correct)) = (p.get("id").and_then(|v| v.as_str()), p.get("correct").and_then(|v| v.as_bool())) else {
                    bail!(UsageError(format!("prediction line {} needs string id and bool correct", i + 1)));
                };
                examples.push(OverlapExample {
                    overlap: overlap.contains(id),
                    correct,
                });
            }
            let r = overlap_report(&examples, confidence)?;
            ctx.emit(&json!({"threshold": split.threshold, "report": r}))
        }
    }
}

fn compare_cmd(ctx: &Ctx, a: CompareArgs) -> Result<()> {
    if !(a.target > 0.0 && a.target <= 1.0) {
        bail!(UsageError(format!("target {} outside (0, 1]", a.target)));
    }
    let (model_cfg, cfg) = train_config(ctx)?;
    let data = load_training(&a.data)?;
    let eval = load_eval_set(&a.data.join("eval.jsonl"))?;
    let configs = [
        TrainConfig {
            objective: Objective::Contrastive,
            ..cfg
        },
        TrainConfig {
            objective: Objective::Bow,
            ..cfg
        },
    ];
    let r = compare_objectives(&data, &model_cfg, &configs, &eval.set, a.target)?;
    ctx.emit(&r)
}
