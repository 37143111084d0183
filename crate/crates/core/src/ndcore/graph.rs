//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op evaluates eagerly and appends a node to the tape, so node order
//! is already a topological order; `backward` walks it once in reverse.

use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    MulTiled(Var, Var),
    Scale(Var, f64),
    ScalarMul(Var, Var),
    Exp(Var),
    Log(Var),
    QuickGelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    MatMul { a: Var, b: Var, tb: bool, dims: MatDims },
    Transpose(Var),
    Reshape(Var),
    GatherRows { x: Var, idx: Rc<[usize]> },
    ConcatRows(Vec<Var>),
    MaskFill { x: Var, mask: Rc<[bool]> },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Rc<[usize]>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Rc<[f64]> },
}

#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single 2-d matrix shared across the batch.
    shared_b: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation; confined to one thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` does not reach the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    fn tiled(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.is_empty() || ta.len() % tb.len() != 0 || ta.last_dim() != tb.last_dim() {
            return Err(shape_err(name, ta, tb));
        }
        let bl = tb.len();
        let mut data = Vec::with_capacity(ta.len());
        for chunk in ta.data().chunks_exact(bl) {
            data.extend(chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(ta.shape(), data)
    }

    /// `a + b` with `b` repeated over contiguous blocks of `a` (bias rows,
    /// position tables).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.tiled("add_tiled", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::AddTiled(a, b), ng))
    }

    pub fn mul_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.tiled("mul_tiled", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MulTiled(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `s · a` where `s` is a one-element node.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(shape_err("scalar_mul", self.value(a), ts));
        }
        let c = ts.item();
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(v, Op::ScalarMul(a, s), ng))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Log(a), ng)
    }

    /// `x · σ(1.702 x)`.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(1.702 * x));
        let ng = self.needs(a);
        self.push(v, Op::QuickGelu(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::new(x.shape(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|r| *r -= lse);
        }
        let v = Tensor::new(x.shape(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Normalization over the last axis without affine terms.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|r| *r = (*r - mean) * is);
            inv_std.push(is);
        }
        let v = Tensor::new(x.shape(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(v, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Rows scaled to unit Euclidean norm; a zero row is an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(x.rows());
        for (i, row) in out.chunks_mut(c).enumerate() {
            let n = row.iter().map(|r| r * r).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {n}; direction undefined"
                )));
            }
            row.iter_mut().for_each(|r| *r /= n);
            norms.push(n);
        }
        let v = Tensor::new(x.shape(), out).expect("same shape");
        let ng = self.needs(a);
        Ok(self.push(v, Op::L2Normalize { x: a, norms }, ng))
    }

    fn mat_dims(&self, name: &'static str, a: Var, b: Var, tb: bool) -> Result<MatDims> {
        let (ta, tb_) = (self.value(a), self.value(b));
        let err = || shape_err(name, ta, tb_);
        if ta.ndim() < 2 {
            return Err(err());
        }
        let k = ta.last_dim();
        let bs = tb_.shape();
        match bs.len() {
            2 => {
                let (bk, n) = if tb { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
                if bk != k {
                    return Err(err());
                }
                Ok(MatDims {
                    batch: 1,
                    m: ta.len() / k.max(1),
                    k,
                    n,
                    shared_b: true,
                })
            }
            3 => {
                let s = ta.shape();
                if s.len() != 3 || s[0] != bs[0] {
                    return Err(err());
                }
                let (bk, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
                if bk != k {
                    return Err(err());
                }
                Ok(MatDims {
                    batch: s[0],
                    m: s[1],
                    k,
                    n,
                    shared_b: false,
                })
            }
            _ => Err(err()),
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool, name: &'static str) -> Result<Var> {
        let d = self.mat_dims(name, a, b, tb)?;
        let (ta, tbv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; d.batch * d.m * d.n];
        let mut shape = ta.shape()[..ta.ndim() - 1].to_vec();
        shape.push(d.n);
        if d.shared_b {
            gemm(d.m, d.k, d.n, ta.data(), false, tbv.data(), tb, &mut out, 0.0);
        } else {
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for i in 0..d.batch {
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    &ta.data()[i * sa..(i + 1) * sa],
                    false,
                    &tbv.data()[i * sb..(i + 1) * sb],
                    tb,
                    &mut out[i * sc..(i + 1) * sc],
                    0.0,
                );
            }
        }
        let v = Tensor::new(&shape, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul { a, b, tb, dims: d }, ng))
    }

    /// `a · b`. `a` is `[..., k]` against a 2-d `b: [k, n]`, or both are
    /// 3-d with a shared leading batch axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, "matmul")
    }

    /// `a · bᵀ` with the same batching rules as [`Graph::matmul`].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).t()?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Rows of a 2-d tensor selected (with repetition allowed) by index.
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx: Rc<[usize]> = idx.into();
        let x = self.value(a);
        if x.ndim() != 2 {
            return Err(shape_err("gather_rows", x, x));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.shape()[0]) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} rows",
                x.shape()[0]
            )));
        }
        let v = x.select_rows(&idx);
        let ng = self.needs(a);
        Ok(self.push(v, Op::GatherRows { x: a, idx }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("empty concat"))?);
        let c = first.last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.last_dim() != c {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(&[rows, c], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Entries where the tiled `mask` is true are replaced by `fill`.
    pub fn mask_fill(&mut self, a: Var, mask: impl Into<Rc<[bool]>>, fill: f64) -> Result<Var> {
        let mask: Rc<[bool]> = mask.into();
        let x = self.value(a);
        if mask.is_empty() || x.len() % mask.len() != 0 {
            return Err(Error::Shape {
                op: "mask_fill",
                left: x.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let ml = mask.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % ml] { fill } else { v })
            .collect();
        let v = Tensor::new(x.shape(), data)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::MaskFill { x: a, mask }, ng))
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let x = self.value(a);
        let w = x.last_dim();
        if x.ndim() != 2 || x.shape()[0] != batch * seq || heads == 0 || w % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                left: x.shape().to_vec(),
                right: vec![batch, seq, heads],
            });
        }
        let dh = w / heads;
        let mut out = vec![0.0; x.len()];
        permute_heads(x.data(), &mut out, batch, seq, heads, dh, false);
        let v = Tensor::new(&[batch * heads, seq, dh], out)?;
        let ng = self.needs(a);
        Ok(self.push(
            v,
            Op::SplitHeads {
                x: a,
                batch,
                seq,
                heads,
            },
            ng,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(Error::Shape {
                op: "merge_heads",
                left: s.to_vec(),
                right: vec![batch, seq, heads],
            });
        }
        let dh = s[2];
        let mut out = vec![0.0; x.len()];
        permute_heads(x.data(), &mut out, batch, seq, heads, dh, true);
        let v = Tensor::new(&[batch * seq, heads * dh], out)?;
        let ng = self.needs(a);
        Ok(self.push(
            v,
            Op::MergeHeads {
                x: a,
                batch,
                seq,
                heads,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let ng = self.needs(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: impl Into<Rc<[usize]>>) -> Result<Var> {
        let targets: Rc<[usize]> = targets.into();
        let x = self.value(logits);
        if x.ndim() != 2 || x.shape()[0] != targets.len() || x.shape()[0] == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: x.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = x.last_dim();
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target {bad} out of range for {c} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets.iter()) {
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            row.iter_mut().for_each(|r| *r = (*r - lse).exp());
        }
        let v = Tensor::scalar(loss / targets.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        ))
    }

    /// Mean over all entries of the sigmoid cross-entropy against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: impl Into<Rc<[f64]>>) -> Result<Var> {
        let targets: Rc<[f64]> = targets.into();
        let x = self.value(logits);
        if x.len() != targets.len() || x.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: x.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss: f64 = x
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum();
        let v = Tensor::scalar(loss / x.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(v, Op::BceWithLogits { logits, targets }, ng))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: lt.shape().to_vec(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gy.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(xb).for_each(|((d, g), x)| *d += g * x)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).zip(xa).for_each(|((d, g), x)| *d += g * x)
                });
            }
            Op::AddTiled(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| {
                    for chunk in g.chunks(d.len()) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
            Op::MulTiled(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let bl = xb.len();
                self.acc(grads, *a, |d| {
                    for (dc, gc) in d.chunks_exact_mut(bl).zip(g.chunks_exact(bl)) {
                        for ((d, &gi), &xi) in dc.iter_mut().zip(gc).zip(xb) {
                            *d += gi * xi;
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for (gc, ac) in g.chunks_exact(bl).zip(xa.chunks_exact(bl)) {
                        for ((d, &gi), &xi) in d.iter_mut().zip(gc).zip(ac) {
                            *d += gi * xi;
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::ScalarMul(a, s) => {
                let c = self.value(*s).item();
                let xa = self.value(*a).data();
                self.acc(grads, *a, |d| axpy(d, g, c));
                self.acc(grads, *s, |d| {
                    d[0] += g.iter().zip(xa).map(|(g, x)| g * x).sum::<f64>()
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * y)
            }),
            Op::Log(a) => {
                let xa = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(xa).for_each(|((d, g), x)| *d += g / x)
                })
            }
            Op::QuickGelu(a) => {
                let xa = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(xa) {
                        let s = sigmoid(1.702 * x);
                        *d += g * (s + 1.702 * x * s * (1.0 - s));
                    }
                })
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = node.value.last_dim();
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gs: f64 = g.iter().sum();
                        for j in 0..c {
                            d[j] += g[j] - y[j].exp() * gs;
                        }
                    }
                })
            }
            Op::LayerNorm { x, inv_std } => {
                let c = node.value.last_dim();
                let cf = c as f64;
                self.acc(grads, *x, |d| {
                    for (((d, g), y), is) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c))
                        .zip(inv_std)
                    {
                        let mg = g.iter().sum::<f64>() / cf;
                        let mgy = g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / cf;
                        for j in 0..c {
                            d[j] += is * (g[j] - mg - y[j] * mgy);
                        }
                    }
                })
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for (((d, g), y), n) in
                        d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(norms)
                    {
                        let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            d[j] += (g[j] - y[j] * dot) / n;
                        }
                    }
                })
            }
            Op::MatMul { a, b, tb, dims } => self.backward_matmul(*a, *b, *tb, *dims, g, grads),
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                self.acc(grads, *a, |d| {
                    // d has shape [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                })
            }
            Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::GatherRows { x, idx } => {
                let c = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |d| axpy(d, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::MaskFill { x, mask } => {
                let ml = mask.len();
                self.acc(grads, *x, |d| {
                    for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                        if !mask[i % ml] {
                            *d += g;
                        }
                    }
                })
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    let mut tmp = vec![0.0; g.len()];
                    permute_heads(g, &mut tmp, *batch, *seq, *heads, dh, true);
                    axpy(d, &tmp, 1.0);
                })
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = node.value.last_dim() / heads;
                self.acc(grads, *x, |d| {
                    let mut tmp = vec![0.0; g.len()];
                    permute_heads(g, &mut tmp, *batch, *seq, *heads, dh, false);
                    axpy(d, &tmp, 1.0);
                })
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / targets.len() as f64;
                self.acc(grads, *logits, |d| {
                    for (r, (d, p)) in d.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for j in 0..c {
                            d[j] += scale * p[j];
                        }
                        d[targets[r]] -= scale;
                    }
                })
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.value(*logits).data();
                let scale = g[0] / x.len() as f64;
                self.acc(grads, *logits, |d| {
                    for ((d, &z), &t) in d.iter_mut().zip(x).zip(targets.iter()) {
                        *d += scale * (sigmoid(z) - t);
                    }
                })
            }
        }
    }

    fn backward_matmul(
        &self,
        a: Var,
        b: Var,
        tb: bool,
        d: MatDims,
        g: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        let nb = if d.shared_b { 1 } else { d.batch };
        // dA = dC · op(B)ᵀ
        self.acc(grads, a, |da| {
            for i in 0..nb {
                let bb = if d.shared_b { xb } else { &xb[i * sb..(i + 1) * sb] };
                gemm(
                    d.m,
                    d.n,
                    d.k,
                    &g[i * sc..(i + 1) * sc],
                    false,
                    bb,
                    !tb,
                    &mut da[i * sa..(i + 1) * sa],
                    1.0,
                );
            }
        });
        // dB = Aᵀ · dC, or (dC)ᵀ · A when B entered transposed
        self.acc(grads, b, |db| {
            for i in 0..nb {
                let (aa, gg) = (&xa[i * sa..(i + 1) * sa], &g[i * sc..(i + 1) * sc]);
                let out = if d.shared_b {
                    &mut db[..]
                } else {
                    &mut db[i * sb..(i + 1) * sb]
                };
                if tb {
                    gemm(d.n, d.m, d.k, gg, true, aa, false, out, 1.0);
                } else {
                    gemm(d.k, d.m, d.n, aa, true, gg, false, out, 1.0);
                }
            }
        });
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }
}

fn axpy(d: &mut [f64], x: &[f64], alpha: f64) {
    for (d, x) in d.iter_mut().zip(x) {
        *d += alpha * x;
    }
}

/// Moves data between `[b·s, h·dh]` and `[b·h, s, dh]` layouts.
fn permute_heads(
    src: &[f64],
    dst: &mut [f64],
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
    merge: bool,
) {
    let w = heads * dh;
    for b in 0..batch {
        for s in 0..seq {
            for h in 0..heads {
                let flat = (b * seq + s) * w + h * dh;
                let split = ((b * heads + h) * seq + s) * dh;
                let (from, to) = if merge { (split, flat) } else { (flat, split) };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for r in row.iter_mut() {
        *r = (*r - m).exp();
        s += *r;
    }
    row.iter_mut().for_each(|r| *r /= s);
}
