//! Binary container shared by checkpoints and embedding caches.
//!
//! Layout: 4-byte magic, `u32` format version, `u64` header length, UTF-8
//! JSON header, then the payload as little-endian `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCKP";

pub fn write_container<W: Write, H: Serialize>(
    mut w: W,
    magic: [u8; 4],
    header: &H,
    payload: &[f64],
) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    w.write_all(&magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(payload.len() * 8);
    for x in payload {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_container<R: Read, H: DeserializeOwned>(
    mut r: R,
    magic: [u8; 4],
) -> Result<(H, Vec<f64>)> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header = serde_json::from_slice(&hbuf)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64".into()));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, payload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_params<W: Write>(w: W, params: &ParamStore) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                decay: p.decay,
            })
            .collect(),
    };
    let payload: Vec<f64> = params
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect();
    write_container(w, CHECKPOINT_MAGIC, &header, &payload)
}

pub fn load_params<R: Read>(r: R) -> Result<ParamStore> {
    let (header, payload): (CheckpointHeader, Vec<f64>) = read_container(r, CHECKPOINT_MAGIC)?;
    let mut store = ParamStore::new();
    let mut off = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data = payload
            .get(off..off + n)
            .ok_or_else(|| Error::Format(format!("payload truncated at {}", e.name)))?
            .to_vec();
        off += n;
        store.add(e.name, Tensor::new(&e.shape, data)?, e.decay);
    }
    if off != payload.len() {
        return Err(Error::Format("trailing payload after last tensor".into()));
    }
    Ok(store)
}

pub fn save_params_file(path: &Path, params: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path)?;
    save_params(std::io::BufWriter::new(f), params)
}

pub fn load_params_file(path: &Path) -> Result<ParamStore> {
    load_params(std::io::BufReader::new(std::fs::File::open(path)?))
}
