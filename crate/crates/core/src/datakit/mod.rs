//! Dataset construction and ingestion: JSONL pair records, substring query
//! filtering with per-query caps, the synthetic shapes corpus and
//! embedding caches.

pub mod cache;
pub mod synth;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

pub use cache::{EmbeddingCache, CACHE_MAGIC};
pub use synth::{
    class_name, gen_eval_set, gen_synthetic, random_scene, render_shape, Color, EvalSet, Shape, ShapeMeta,
    SizeClass, SyntheticSample, SyntheticSpec,
};

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-query admission cap used when none is given.
pub const DEFAULT_PER_QUERY_CAP: usize = 20_000;
const INLINE_PREFIX: &str = "data:image/png;base64,";

/// One `(image, caption)` pair. `image` is either a path relative to the
/// JSONL file or an inline base64 PNG data URI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl PairRecord {
    pub fn inline(image: &Image, text: impl Into<String>) -> Result<Self> {
        Ok(PairRecord {
            image: format!("{INLINE_PREFIX}{}", STANDARD.encode(image.to_png()?)),
            text: text.into(),
            meta: None,
        })
    }

    /// Decodes the image, resolving paths against `base_dir`.
    pub fn load_image(&self, base_dir: &Path) -> Result<Image> {
        let bytes = match self.image.strip_prefix(INLINE_PREFIX) {
            Some(b64) => STANDARD
                .decode(b64)
                .map_err(|e| Error::Format(format!("bad inline image: {e}")))?,
            None => fs::read(base_dir.join(&self.image))?,
        };
        Image::from_png(&bytes)
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a pair file and decodes every image.
pub fn load_pairs(path: &Path) -> Result<(Vec<Image>, Vec<String>)> {
    let records: Vec<PairRecord> = read_jsonl(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut images = Vec::with_capacity(records.len());
    let mut texts = Vec::with_capacity(records.len());
    for r in records {
        if r.text.trim().is_empty() {
            return Err(Error::invalid("pair record with empty caption"));
        }
        images.push(r.load_image(base)?);
        texts.push(r.text);
    }
    Ok((images, texts))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTally {
    pub query: String,
    /// Records whose caption contains the query.
    pub matched: usize,
    /// Records admitted on this query's quota.
    pub admitted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub per_query_cap: usize,
    pub records_seen: usize,
    pub records_admitted: usize,
    pub queries: Vec<QueryTally>,
}

/// Admits a record when its lower-cased caption contains a lower-cased
/// query with quota left; the first listed such query claims the slot.
/// Every matching query's `matched` tally counts the record.
pub fn build_pairs(records: &[PairRecord], queries: &[String], per_query_cap: usize) -> Result<(Vec<PairRecord>, Manifest)> {
    if queries.is_empty() {
        return Err(Error::invalid("query list is empty"));
    }
    if per_query_cap == 0 {
        return Err(Error::invalid("per-query cap must be at least 1"));
    }
    let lowered: Vec<String> = queries.iter().map(|q| q.to_lowercase()).collect();
    let mut tallies: Vec<QueryTally> = queries
        .iter()
        .map(|q| QueryTally { query: q.clone(), matched: 0, admitted: 0 })
        .collect();
    let mut kept = Vec::new();
    for r in records {
        let caption = r.text.to_lowercase();
        let mut claimed = false;
        for (q, t) in lowered.iter().zip(tallies.iter_mut()) {
            if !q.is_empty() && caption.contains(q.as_str()) {
                t.matched += 1;
                if !claimed && t.admitted < per_query_cap {
                    t.admitted += 1;
                    claimed = true;
                }
            }
        }
        if claimed {
            kept.push(r.clone());
        }
    }
    let manifest = Manifest {
        per_query_cap,
        records_seen: records.len(),
        records_admitted: kept.len(),
        queries: tallies,
    };
    Ok((kept, manifest))
}

/// Query file: one query per non-blank line.
pub fn parse_queries(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}
