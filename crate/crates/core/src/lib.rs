//! Zero-shot dense prediction from a vision-language attention-pool head.
//!
//! The crate converts a toy CLIP-style encoder into a per-pixel classifier whose
//! weights come straight from prompt-ensembled text embeddings, trains a
//! separate target network from its pseudo labels, and scores everything with
//! the usual zero-shot segmentation metrics and a corruption sweep.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: dense `f64` kernel with forward and backward ops.
//! - [`textbank`]: prompt templates, toy text encoder, classifier bank.
//! - [`clip_adapt`]: encoder, attention pooling, dense conversion, inference.
//! - [`metrics`]: confusion matrix, IoU family, pixel and mean accuracy.
//! - [`dataio`]: synthetic scenes, PPM/PGM files, dataset manifests.
//! - [`corruption`]: input corruptions and severity sweeps.
//! - [`pipeline`]: pseudo-label guided learning and self-training.
//! - [`planted`]: the default synthetic benchmark, assembled end to end.

pub mod clip_adapt;
pub mod container;
pub mod corruption;
pub mod dataio;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod pipeline;
pub mod planted;
pub mod seed;
pub mod tensor;
pub mod textbank;

pub use error::{Error, Result};
pub use labels::{ConfidenceMap, LabelMap, IGNORE_INDEX};
pub use tensor::Tensor4;
