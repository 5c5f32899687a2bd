//! Sparse, non-negative, annotator-conditioned embeddings learned from
//! odd-one-out (3AFC) similarity judgments.
//!
//! The crate is organised around the data flow of a study:
//!
//! - [`corpus`]: stimuli, annotators and judgments, quality control, splits.
//! - [`sampler`]: triplet generation for annotation batches.
//! - [`embedder`]: the conditional choice model, its loss, analytic
//!   gradients, Adam, training and checkpoints.
//! - [`pruner`]: post-training dimension retention and cross-run matching.
//! - [`evaluator`]: accuracy, Bayes ceiling, entropy correlation,
//!   similarity matrices, dimension elimination and the annotator swap test.
//! - [`insight`]: grids, human-generated embeddings, mask classification,
//!   AUC, external-score correlation and disparity estimation.
//! - [`synthdata`]: ground-truth worlds used as oracles.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is
//! enabled (the default) and sequentially otherwise. Reductions happen in a
//! fixed order, so both builds produce bit-identical results.

pub mod corpus;
pub mod embedder;
pub mod error;
pub mod evaluator;
pub mod insight;
pub mod par;
pub mod pruner;
pub mod sampler;
pub mod stats;
pub mod synthdata;

pub use error::{Error, Result};
