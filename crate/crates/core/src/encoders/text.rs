use rand::Rng;

use super::config::TextEncoderConfig;
use super::transformer::{LayerNorm, Transformer, INIT_STD};
use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::textproc::TokenSequence;

/// Causally masked transformer over token sequences; the final-layer
/// activation at each sequence's EOS position is its feature.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    token_embedding: ParamId,
    positional: ParamId,
    transformer: Transformer,
    ln_final: LayerNorm,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: TextEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        Ok(TextEncoder {
            config,
            token_embedding: store.add(
                "text.token_embedding",
                Tensor::randn(&[config.vocab_size, d], INIT_STD, rng),
                true,
            ),
            positional: store.add(
                "text.positional",
                Tensor::randn(&[config.context_length, d], INIT_STD, rng),
                true,
            ),
            transformer: Transformer::new(store, "text.blocks", d, config.heads, config.layers, rng),
            ln_final: LayerNorm::new(store, "text.ln_final", d),
        })
    }

    fn check(&self, seqs: &[TokenSequence]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        let c = self.config.context_length;
        for s in seqs {
            if s.ids.len() != c {
                return Err(Error::invalid(format!(
                    "sequence of length {} does not match context length {c}",
                    s.ids.len()
                )));
            }
            if s.length < 2 || s.length > c {
                return Err(Error::invalid("token sequence without SOS/EOS"));
            }
            if let Some(&bad) = s.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
                return Err(Error::UnknownToken(bad));
            }
        }
        Ok(())
    }

    /// Token plus position embeddings, `[batch·context, width]`.
    pub fn embed_tokens(&self, g: &mut Graph, p: &Bound, seqs: &[TokenSequence]) -> Result<Var> {
        self.check(seqs)?;
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.ids.iter().map(|&i| i as usize))
            .collect();
        let x = g.gather_rows(p[self.token_embedding], ids)?;
        g.add_tiled(x, p[self.positional])
    }

    /// Transformer output at every position, `[batch·context, width]`.
    pub fn hidden_states(&self, g: &mut Graph, p: &Bound, x: Var, batch: usize) -> Result<Var> {
        self.transformer
            .forward(g, p, x, batch, self.config.context_length, true)
    }

    /// Features `[batch, width]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, seqs: &[TokenSequence]) -> Result<Var> {
        let x = self.embed_tokens(g, p, seqs)?;
        let h = self.hidden_states(g, p, x, seqs.len())?;
        let c = self.config.context_length;
        let eos: Vec<usize> = seqs
            .iter()
            .enumerate()
            .map(|(b, s)| b * c + s.eos_position())
            .collect();
        let f = g.gather_rows(h, eos)?;
        self.ln_final.forward(g, p, f)
    }
}
