//! Dense tensors, reverse-mode differentiation, AdamW and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{log_sum_exp, sigmoid, softplus, Grads, Graph, Var};
pub use optim::{cosine_lr, AdamWConfig, OptimizerState};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tensor::{argmax, Tensor};

/// Layer-norm epsilon used throughout the encoders.
pub const LN_EPS: f64 = 1e-5;
