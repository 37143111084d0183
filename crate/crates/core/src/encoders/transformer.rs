use rand::Rng;

use crate::error::Result;
use crate::ndcore::{Bound, Graph, ParamId, ParamStore, Tensor, Var, LN_EPS};

/// Standard deviation for embeddings and projections.
pub const INIT_STD: f64 = 0.02;

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[width]), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layernorm(x, LN_EPS);
        let s = g.mul_tiled(n, p[self.gain])?;
        g.add_tiled(s, p[self.bias])
    }
}

/// Dense layer `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[fan_in, fan_out], std, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false));
        Linear { weight, bias }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_tiled(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Multi-head self-attention over `[batch·seq, width]` rows.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), width, width, INIT_STD, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, INIT_STD, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, INIT_STD, true, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, out_std, true, rng),
            heads,
        }
    }

    /// `causal` forbids attention from a position to any later one.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        causal: bool,
    ) -> Result<Var> {
        let h = self.heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let q = g.split_heads(q, batch, seq, h)?;
        let k = g.split_heads(k, batch, seq, h)?;
        let v = g.split_heads(v, batch, seq, h)?;
        let dh = g.value(q).last_dim();
        let scores = g.matmul_nt(q, k)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if causal {
            scores = g.mask_fill(scores, causal_mask(seq), MASK_FILL)?;
        }
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let merged = g.merge_heads(ctx, batch, seq, h)?;
        self.out.forward(g, p, merged)
    }
}

/// Fill value for masked attention logits; finite so no Inf enters the tape.
pub const MASK_FILL: f64 = -1e9;

/// `seq × seq` mask, true above the diagonal.
pub fn causal_mask(seq: usize) -> Vec<bool> {
    (0..seq * seq).map(|i| i % seq > i / seq).collect()
}

/// Pre-norm residual block: attention then a 4× QuickGELU MLP.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc: Linear,
    proj: Linear,
}

impl ResidualBlock {
    /// Output projections writing into the residual stream are scaled by
    /// `1/√(2·layers)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let out_std = INIT_STD / ((2 * layers) as f64).sqrt();
        ResidualBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, out_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc: Linear::new(store, &format!("{name}.mlp.fc"), width, 4 * width, INIT_STD, true, rng),
            proj: Linear::new(store, &format!("{name}.mlp.proj"), 4 * width, width, out_std, true, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        causal: bool,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, batch, seq, causal)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc.forward(g, p, h)?;
        let h = g.quick_gelu(h);
        let h = self.proj.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// A stack of residual blocks.
#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<ResidualBlock>,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        Transformer {
            blocks: (0..layers)
                .map(|i| ResidualBlock::new(store, &format!("{name}.{i}"), width, heads, layers, rng))
                .collect(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        batch: usize,
        seq: usize,
        causal: bool,
    ) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, p, x, batch, seq, causal)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_is_strict_upper_triangle() {
        let m = causal_mask(3);
        assert_eq!(
            m,
            vec![false, true, true, false, false, true, false, false, false]
        );
    }
}
