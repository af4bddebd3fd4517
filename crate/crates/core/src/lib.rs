//! Extend a frozen multi-modal contrastive embedding space (the *base*) with
//! another pre-trained space (a *leaf*) using only unpaired unimodal
//! embeddings.
//!
//! The pipeline:
//!
//! 1. [`aggregation`] builds pseudo quadruples by softmax-weighted retrieval
//!    across the two spaces, with each modality taking a turn as the query.
//! 2. [`projector`] holds the trainable map: a linear `f_l` that closes the
//!    modality gap inside the leaf, then an MLP `f_m` into the base space.
//! 3. [`training`] optimizes the projector with an L2 gap loss plus four
//!    InfoNCE terms while the base space stays frozen.
//! 4. [`evaluation`] measures cross-modal retrieval and zero-shot
//!    classification; [`synth`] generates worlds with known ground truth.

// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod codec;
pub mod aggregation;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod projector;
pub mod rng;
pub mod store;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use store::{EmbeddingMatrix, SpaceManifest};
