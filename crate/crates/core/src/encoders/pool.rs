use rand::Rng;

use super::transformer::{Linear, INIT_STD};
use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, ParamStore, Tensor, Var};

/// Single multi-head QKV attention layer whose one query is projected from
/// the mean of the feature grid. Keys and values come from the grid
/// positions; there is no position encoding.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPool {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    width: usize,
}

/// Pooled output plus the attention weights `[batch·heads, positions]`.
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    pub output: Var,
    pub weights: Var,
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!(
                "pool width {width} not divisible by heads {heads}"
            )));
        }
        Ok(AttentionPool {
            q: Linear::new(store, &format!("{name}.q"), width, width, INIT_STD, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, INIT_STD, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, INIT_STD, true, rng),
            out: Linear::new(store, &format!("{name}.out"), width, out_width, INIT_STD, true, rng),
            heads,
            width,
        })
    }

    pub fn value_proj(&self) -> Linear {
        self.v
    }

    pub fn out_proj(&self) -> Linear {
        self.out
    }

    /// Pools `grid: [batch·positions, width]` to `[batch, out_width]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        grid: Var,
        batch: usize,
        positions: usize,
    ) -> Result<Pooled> {
        if positions == 0 || batch == 0 {
            return Err(Error::invalid("attention pooling over an empty grid"));
        }
        let shape = g.value(grid).shape().to_vec();
        if shape != [batch * positions, self.width] {
            return Err(Error::Shape {
                op: "attention_pool",
                left: shape,
                right: vec![batch * positions, self.width],
            });
        }
        let mut avg = Tensor::zeros(&[batch, batch * positions]);
        for b in 0..batch {
            for s in 0..positions {
                avg.data_mut()[b * batch * positions + b * positions + s] = 1.0 / positions as f64;
            }
        }
        let avg = g.constant(avg);
        let mean = g.matmul(avg, grid)?;
        let h = self.heads;
        let q = self.q.forward(g, p, mean)?;
        let k = self.k.forward(g, p, grid)?;
        let v = self.v.forward(g, p, grid)?;
        let q = g.split_heads(q, batch, 1, h)?;
        let k = g.split_heads(k, batch, positions, h)?;
        let v = g.split_heads(v, batch, positions, h)?;
        let dh = self.width / h;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores);
        let ctx = g.matmul(weights, v)?;
        let merged = g.merge_heads(ctx, batch, 1, h)?;
        let output = self.out.forward(g, p, merged)?;
        let weights = g.reshape(weights, &[batch * h, positions])?;
        Ok(Pooled { output, weights })
    }
}
