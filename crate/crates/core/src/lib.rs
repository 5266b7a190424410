//! Virtual fusion training for wearable activity recognition.
//!
//! Several time-synchronized sensors are available while training but a
//! single sensor (or a fused subset of them) is used at inference. Every
//! modality gets its own feature extractor and classifier; a multi-view
//! NT-Xent objective ties the extractors together on co-temporal windows,
//! and the whole graph is optimized jointly with the averaged
//! cross-entropy of the classified nodes.
//!
//! Module map:
//!
//! - [`datasets`]: ingestion, resampling, skeleton normalization, sliding
//!   windows, subject splits and a synthetic correlated generator.
//! - [`sampling`]: class-balanced labeled sampling and half/half batches.
//! - [`augmentation`]: per-task stochastic transforms.
//! - [`nn`]: the small set of layers (with hand-written backward passes)
//!   the extractors are built from.
//! - [`model`]: modality graphs, early/late fusion, extractors and heads.
//! - [`objectives`]: NT-Xent, multi-view contrastive and classification losses.
//! - [`training`]: the joint optimization loop, plateau schedule, checkpoints.
//! - [`evaluation`]: confusion matrices, F1 scores and comparison tables.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
