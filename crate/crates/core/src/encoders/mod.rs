//! Text transformer, ViT image tower, attention pooling and compute scaling.

pub mod config;
pub mod pool;
pub mod scale;
pub mod text;
pub mod transformer;
pub mod vision;

pub use config::{parse_key_values, ImageEncoderConfig, KeyValues, TextEncoderConfig};
pub use pool::{AttentionPool, Pooled};
pub use scale::{realized_compute, scale_plan, ScalePlan};
pub use text::TextEncoder;
pub use transformer::{LayerNorm, Linear, Transformer, INIT_STD};
pub use vision::ImageEncoder;

use crate::error::Result;
use crate::image::Image;
use crate::ndcore::{Graph, ParamStore, Tensor};
use crate::textproc::TokenSequence;

/// Inference-only text features `[batch, width]`.
pub fn embed_text(enc: &TextEncoder, store: &ParamStore, seqs: &[TokenSequence]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = enc.forward(&mut g, &p, seqs)?;
    Ok(g.value(f).clone())
}

/// Inference-only image features `[batch, width]`.
pub fn embed_image(enc: &ImageEncoder, store: &ParamStore, images: &[Image]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = enc.forward(&mut g, &p, images)?;
    Ok(g.value(f).clone())
}
