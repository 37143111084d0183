use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::checkpoint::{read_container, write_container};
use crate::ndcore::Tensor;

pub const CACHE_MAGIC: [u8; 4] = *b"DCEC";

/// Embedding rows keyed by id, stamped with the producing model's
/// fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub ids: Vec<String>,
    pub embeddings: Tensor,
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    fingerprint: String,
    dim: usize,
    ids: Vec<String>,
}

impl EmbeddingCache {
    pub fn new(ids: Vec<String>, embeddings: Tensor, fingerprint: impl Into<String>) -> Result<Self> {
        if embeddings.ndim() != 2 || embeddings.rows() != ids.len() {
            return Err(Error::invalid(format!(
                "{} ids for embedding matrix {:?}",
                ids.len(),
                embeddings.shape()
            )));
        }
        Ok(EmbeddingCache {
            ids,
            embeddings,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let h = CacheHeader {
            fingerprint: self.fingerprint.clone(),
            dim: self.embeddings.last_dim(),
            ids: self.ids.clone(),
        };
        write_container(BufWriter::new(File::create(path)?), CACHE_MAGIC, &h, self.embeddings.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, data): (CacheHeader, Vec<f64>) = read_container(BufReader::new(File::open(path)?), CACHE_MAGIC)?;
        if data.len() != h.ids.len() * h.dim {
            return Err(Error::Format("cache payload does not match header".into()));
        }
        EmbeddingCache::new(h.ids.clone(), Tensor::new(&[h.ids.len(), h.dim], data)?, h.fingerprint)
    }

    /// Adds rows produced by the same model.
    pub fn append(&mut self, other: &EmbeddingCache) -> Result<()> {
        if other.fingerprint != self.fingerprint {
            return Err(Error::invalid(format!(
                "fingerprint mismatch: cache {} vs new rows {}",
                self.fingerprint, other.fingerprint
            )));
        }
        if !self.is_empty() && other.embeddings.last_dim() != self.embeddings.last_dim() {
            return Err(Error::invalid("embedding widths differ"));
        }
        let mut data = self.embeddings.data().to_vec();
        data.extend_from_slice(other.embeddings.data());
        self.ids.extend(other.ids.iter().cloned());
        self.embeddings = Tensor::new(&[self.ids.len(), other.embeddings.last_dim()], data)?;
        Ok(())
    }

    /// Loads `path` (if present), appends, and writes it back.
    pub fn append_to_file(path: &Path, rows: &EmbeddingCache) -> Result<EmbeddingCache> {
        let mut cache = if path.exists() {
            EmbeddingCache::load(path)?
        } else {
            EmbeddingCache::new(Vec::new(), Tensor::zeros(&[0, rows.embeddings.last_dim()]), rows.fingerprint.clone())?
        };
        cache.append(rows)?;
        cache.save(path)?;
        Ok(cache)
    }
}
