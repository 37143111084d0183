//! Desk-scale contrastive language-image pretraining and its evaluation
//! toolkit: tokenizer, autodiff core, encoders, contrastive objective,
//! trainer, zero-shot classifiers, linear probes, robustness and overlap
//! statistics, and a near-duplicate detector.

pub mod analysis;
pub mod contrastive;
pub mod datakit;
pub mod dedup;
pub mod encoders;
pub mod error;
pub mod image;
pub mod model;
pub mod probe;
pub mod ndcore;
pub mod textproc;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
