//! Metric-learning projection head over precomputed backbone features.
//!
//! The crate trains a 64-dimensional embedding head (affine-free BatchNorm
//! followed by a Linear layer, ArcFace objective, SAM+AdamW optimization)
//! on stored feature vectors, evaluates instance retrieval with mAP@5
//! under a class-disjoint zero-shot protocol, and plans deterministic
//! inference-time preprocessing / TTA variants.
//!
//! Modules follow the pipeline:
//! - [`features`]: manifests, the GUIEFEAT feature container, subsampling
//!   rules, class-disjoint splits, synthetic data.
//! - [`head`]: BatchNorm + Linear + L2 normalization and ArcFace with
//!   analytic gradients.
//! - [`optim`]: AdamW, the SAM wrapper, warmup + cosine-annealing schedule.
//! - [`train`]: the epoch loop, checkpoints, zero-shot selection.
//! - [`retrieval`]: exact cosine k-NN and mAP@k (with a reference scorer).
//! - [`preprocess`]: pad/crop/resize plans, bicubic resampling, TTA
//!   routing, embedding aggregation.
//! - [`cli`]: the `guie` executable's subcommands.

pub mod cli;
pub mod error;
pub mod features;
pub mod head;
pub mod optim;
pub mod preprocess;
pub mod retrieval;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
