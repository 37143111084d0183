use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "text width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.context_length < 2 || self.vocab_size < 3 || self.layers == 0 {
            return Err(Error::invalid("text encoder config out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Layer norm on the combined patch and position embeddings before
    /// the transformer. Off only for ablations.
    #[serde(default = "yes")]
    pub pre_norm: bool,
}

fn yes() -> bool {
    true
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "image width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::invalid("image encoder needs at least one layer"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Typed lookup over a parsed key=value map with defaults.
pub struct KeyValues<'a>(pub &'a BTreeMap<String, String>);

impl KeyValues<'_> {
    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for {key}: {v:?}"))),
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_with_comments() {
        let m = parse_key_values("a = 1\n# skip\nb=two # trailing\n\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "two");
        let kv = KeyValues(&m);
        assert_eq!(kv.get("a", 0usize).unwrap(), 1);
        assert_eq!(kv.get("missing", 7usize).unwrap(), 7);
        assert!(kv.get::<usize>("b", 0).is_err());
        assert!(parse_key_values("novalue").is_err());
    }

    #[test]
    fn patch_arithmetic() {
        let c = ImageEncoderConfig {
            image_size: 32,
            patch_size: 8,
            layers: 2,
            width: 64,
            heads: 4,
            pre_norm: true,
        };
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.seq_len(), 17);
        assert!(ImageEncoderConfig { patch_size: 7, ..c }.validate().is_err());
        assert!(ImageEncoderConfig { heads: 3, ..c }.validate().is_err());
    }
}
