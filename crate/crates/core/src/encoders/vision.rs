use rand::Rng;

use super::config::ImageEncoderConfig;
use super::transformer::{LayerNorm, Transformer, INIT_STD};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::ndcore::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

pub const CHANNELS: usize = 3;

/// Vision transformer: non-overlapping patches, a class token, learned
/// positions, an extra layer norm before the blocks, and the class-token
/// output after a final layer norm as the feature.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    patch_embed: ParamId,
    class_embedding: ParamId,
    positional: ParamId,
    ln_pre: LayerNorm,
    transformer: Transformer,
    ln_post: LayerNorm,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: ImageEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let pdim = config.patch_size * config.patch_size * CHANNELS;
        Ok(ImageEncoder {
            config,
            patch_embed: store.add(
                format!("{prefix}.patch_embed"),
                Tensor::randn(&[pdim, d], INIT_STD, rng),
                true,
            ),
            class_embedding: store.add(
                format!("{prefix}.class_embedding"),
                Tensor::randn(&[1, d], INIT_STD, rng),
                true,
            ),
            positional: store.add(
                format!("{prefix}.positional"),
                Tensor::randn(&[config.seq_len(), d], INIT_STD, rng),
                true,
            ),
            ln_pre: LayerNorm::new(store, &format!("{prefix}.ln_pre"), d),
            transformer: Transformer::new(store, &format!("{prefix}.blocks"), d, config.heads, config.layers, rng),
            ln_post: LayerNorm::new(store, &format!("{prefix}.ln_post"), d),
        })
    }

    /// Flattened patches `[batch·patches, patch²·channels]`, pixels mapped
    /// from `[0, 1]` to `[-1, 1]`.
    pub fn patchify(&self, images: &[Image]) -> Result<Tensor> {
        let (s, p) = (self.config.image_size, self.config.patch_size);
        let grid = s / p;
        let pdim = p * p * CHANNELS;
        let mut data = Vec::with_capacity(images.len() * grid * grid * pdim);
        for img in images {
            if img.height != s || img.width != s || img.channels != CHANNELS {
                return Err(Error::Shape {
                    op: "embed_image",
                    left: vec![img.height, img.width, img.channels],
                    right: vec![s, s, CHANNELS],
                });
            }
            for gy in 0..grid {
                for gx in 0..grid {
                    for y in 0..p {
                        let row = ((gy * p + y) * s + gx * p) * CHANNELS;
                        data.extend(img.data[row..row + p * CHANNELS].iter().map(|v| 2.0 * v - 1.0));
                    }
                }
            }
        }
        Tensor::new(&[images.len() * grid * grid, pdim], data)
    }

    /// Token sequence before the transformer, `[batch·(patches+1), width]`.
    pub fn embed_patches(&self, g: &mut Graph, p: &Bound, images: &[Image]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::invalid("empty image batch"));
        }
        let patches = g.constant(self.patchify(images)?);
        let emb = g.matmul(patches, p[self.patch_embed])?;
        let all = g.concat_rows(&[p[self.class_embedding], emb])?;
        let np = self.config.num_patches();
        let order: Vec<usize> = (0..images.len())
            .flat_map(|b| std::iter::once(0).chain((0..np).map(move |i| 1 + b * np + i)))
            .collect();
        let seq = g.gather_rows(all, order)?;
        let x = g.add_tiled(seq, p[self.positional])?;
        if self.config.pre_norm {
            self.ln_pre.forward(g, p, x)
        } else {
            Ok(x)
        }
    }

    /// Features `[batch, width]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: &[Image]) -> Result<Var> {
        let x = self.embed_patches(g, p, images)?;
        let seq = self.config.seq_len();
        let h = self.transformer.forward(g, p, x, images.len(), seq, false)?;
        let cls: Vec<usize> = (0..images.len()).map(|b| b * seq).collect();
        let f = g.gather_rows(h, cls)?;
        self.ln_post.forward(g, p, f)
    }
}
