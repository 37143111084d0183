//! File plumbing shared by the subcommands.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;

use deskclip::datakit::{read_jsonl, EvalSet, PairRecord};
use deskclip::encoders::parse_key_values;
use deskclip::image::Image;

/// Bad arguments or inputs detected by the CLI itself (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    Ok(parse_key_values(&text)?)
}

/// Non-blank, trimmed lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// A JSON array, or one JSON value per line.
pub fn read_json_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    Ok(read_jsonl(path)?)
}

pub struct LoadedRecord {
    pub record: PairRecord,
    pub image: Image,
}

pub fn load_records(path: &Path) -> Result<Vec<LoadedRecord>> {
    let records: Vec<PairRecord> = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    records
        .into_iter()
        .map(|record| {
            let image = record.load_image(base)?;
            Ok(LoadedRecord { record, image })
        })
        .collect()
}

/// `meta.id`, else the 1-based line position.
pub fn record_id(r: &PairRecord, index: usize) -> String {
    r.meta
        .as_ref()
        .and_then(|m| m.get("id"))
        .and_then(|v| v.as_str())
        .map_or_else(|| format!("line-{}", index + 1), str::to_string)
}

pub struct LoadedEval {
    pub set: EvalSet,
    pub ids: Vec<String>,
}

/// Records with `meta.label` (class index), and optionally `meta.class`
/// (name) and `meta.held_out`.
pub fn load_eval_set(path: &Path) -> Result<LoadedEval> {
    let recs = load_records(path)?;
    if recs.is_empty() {
        return Err(UsageError(format!("{} holds no records", path.display())).into());
    }
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    let mut held: BTreeMap<usize, bool> = BTreeMap::new();
    let mut set = EvalSet {
        class_names: Vec::new(),
        images: Vec::with_capacity(recs.len()),
        labels: Vec::with_capacity(recs.len()),
        held_out: Vec::new(),
    };
    let mut ids = Vec::with_capacity(recs.len());
    for (i, r) in recs.into_iter().enumerate() {
        let meta = r.record.meta.as_ref();
        let label = meta
            .and_then(|m| m.get("label"))
            .and_then(|l| l.as_u64())
            .ok_or_else(|| UsageError(format!("{}: record {} has no integer meta.label", path.display(), i + 1)))?
            as usize;
        if let Some(name) = meta.and_then(|m| m.get("class")).and_then(|c| c.as_str()) {
            names.entry(label).or_insert_with(|| name.to_string());
        }
        let h = meta.and_then(|m| m.get("held_out")).and_then(|h| h.as_bool()).unwrap_or(false);
        *held.entry(label).or_insert(h) |= h;
        ids.push(record_id(&r.record, i));
        set.images.push(r.image);
        set.labels.push(label);
    }
    let k = set.labels.iter().max().map_or(0, |m| m + 1);
    set.class_names = (0..k).map(|c| names.get(&c).cloned().unwrap_or_else(|| format!("class {c}"))).collect();
    set.held_out = (0..k).map(|c| held.get(&c).copied().unwrap_or(false)).collect();
    Ok(LoadedEval { set, ids })
}
