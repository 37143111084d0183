//! Joint projection, temperature-scaled cosine logits, the symmetric
//! cross-entropy objective, and the bag-of-words predictive baseline.

use crate::error::{Error, Result};
use crate::ndcore::{Graph, Tensor, Var};

/// Initial softmax temperature.
pub const INIT_TEMPERATURE: f64 = 0.07;
/// Upper bound on `exp(log_scale)`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Log-parameterized multiplier on cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitScale {
    pub log_scale: f64,
}

impl Default for LogitScale {
    fn default() -> Self {
        LogitScale {
            log_scale: (1.0 / INIT_TEMPERATURE).ln(),
        }
    }
}

impl LogitScale {
    pub fn new(log_scale: f64) -> Self {
        LogitScale { log_scale }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn clamped(self) -> Self {
        LogitScale {
            log_scale: clamp_logit_scale(self.log_scale),
        }
    }
}

/// Largest log scale whose `exp` does not exceed [`MAX_LOGIT_SCALE`];
/// `exp(ln 100)` rounds up to 100.00000000000004.
pub fn max_log_scale() -> f64 {
    let c = MAX_LOGIT_SCALE.ln();
    if c.exp() > MAX_LOGIT_SCALE {
        f64::from_bits(c.to_bits() - 1)
    } else {
        c
    }
}

/// `min(log_scale, ln 100)`, rounded so that `exp` of the result is at
/// most 100.
pub fn clamp_logit_scale(log_scale: f64) -> f64 {
    log_scale.min(max_log_scale())
}

/// Image and text projections into the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointProjection {
    pub image: Tensor,
    pub text: Tensor,
}

impl JointProjection {
    pub fn new(image: Tensor, text: Tensor) -> Result<Self> {
        if image.ndim() != 2 || text.ndim() != 2 || image.shape()[1] != text.shape()[1] {
            return Err(Error::Shape {
                op: "joint_projection",
                left: image.shape().to_vec(),
                right: text.shape().to_vec(),
            });
        }
        Ok(JointProjection { image, text })
    }

    pub fn embed_dim(&self) -> usize {
        self.image.shape()[1]
    }
}

/// `l2_normalize(features · w)` on the graph.
pub fn project_normalize_var(g: &mut Graph, features: Var, w: Var) -> Result<Var> {
    let e = g.matmul(features, w)?;
    g.l2_normalize(e)
}

/// `exp(log_scale) · I_e · T_eᵀ` on the graph.
pub fn similarity_logits_var(g: &mut Graph, image: Var, text: Var, log_scale: Var) -> Result<Var> {
    let (ri, rt) = (g.value(image).rows(), g.value(text).rows());
    if ri != rt {
        return Err(Error::Shape {
            op: "similarity_logits",
            left: g.value(image).shape().to_vec(),
            right: g.value(text).shape().to_vec(),
        });
    }
    let sims = g.matmul_nt(image, text)?;
    let s = g.exp(log_scale);
    g.scalar_mul(sims, s)
}

/// Mean of the image→text and text→image cross-entropies with matched
/// pairs on the diagonal.
pub fn clip_loss_var(g: &mut Graph, logits: Var) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::Shape {
            op: "clip_loss",
            left: shape.clone(),
            right: shape,
        });
    }
    let n = shape[0];
    let labels: std::rc::Rc<[usize]> = (0..n).collect();
    let loss_i = g.cross_entropy(logits, labels.clone())?;
    let lt = g.transpose(logits)?;
    let loss_t = g.cross_entropy(lt, labels)?;
    let sum = g.add(loss_i, loss_t)?;
    Ok(g.scale(sum, 0.5))
}

/// Full objective from already-projected, unnormalized embeddings.
pub fn contrastive_loss_var(
    g: &mut Graph,
    image_emb: Var,
    text_emb: Var,
    log_scale: Var,
) -> Result<Var> {
    let i = g.l2_normalize(image_emb)?;
    let t = g.l2_normalize(text_emb)?;
    let logits = similarity_logits_var(g, i, t, log_scale)?;
    clip_loss_var(g, logits)
}

pub fn project_normalize(features: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (f, w) = (g.constant(features.clone()), g.constant(w.clone()));
    let out = project_normalize_var(&mut g, f, w)?;
    Ok(g.value(out).clone())
}

pub fn similarity_logits(image: &Tensor, text: &Tensor, scale: LogitScale) -> Result<Tensor> {
    let mut g = Graph::new();
    let i = g.constant(image.clone());
    let t = g.constant(text.clone());
    let s = g.constant(Tensor::scalar(scale.log_scale));
    let out = similarity_logits_var(&mut g, i, t, s)?;
    Ok(g.value(out).clone())
}

pub fn clip_loss(logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = clip_loss_var(&mut g, l)?;
    Ok(g.value(out).item())
}

fn check_binary(targets: &Tensor) -> Result<()> {
    if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!("bag-of-words target {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Independent per-word sigmoid cross-entropy of a linear head
/// `features · w + b` against binary bag-of-words targets, averaged.
pub fn bow_loss_var(
    g: &mut Graph,
    features: Var,
    w: Var,
    b: Var,
    targets: &Tensor,
) -> Result<Var> {
    check_binary(targets)?;
    let z = g.matmul(features, w)?;
    let z = g.add_tiled(z, b)?;
    if g.value(z).shape() != targets.shape() {
        return Err(Error::Shape {
            op: "bow_loss",
            left: g.value(z).shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    g.bce_with_logits(z, targets.data().to_vec())
}

/// Bag-of-words loss for precomputed logits.
pub fn bow_loss(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    check_binary(targets)?;
    if logits.shape() != targets.shape() {
        return Err(Error::Shape {
            op: "bow_loss",
            left: logits.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let out = g.bce_with_logits(z, targets.data().to_vec())?;
    Ok(g.value(out).item())
}
