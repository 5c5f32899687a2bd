//! The conditional odd-one-out model.
//!
//! Annotator `a` judges the similarity of stimuli `i` and `j` as
//! `s_a(i, j) = (σ(φ_a) ⊙ relu(w_i))ᵀ (σ(φ_a) ⊙ relu(w_j))` and picks the
//! odd one out of a triplet with probability proportional to the
//! exponentiated similarity of the remaining pair. Training minimises the
//! negative log-likelihood plus an L1 penalty on rectified embeddings, a
//! penalty on negative embedding values and an L2 penalty on mask logits.

mod adam;
mod checkpoint;
mod model;
mod params;
mod train;

pub use adam::Adam;
pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use model::{
    batch_gradients, batch_loss, choice_probs, gradients, loss, masked_similarity, resolve_batch, Gradients,
    ResolvedJudgment,
};
pub use params::{Mode, ModelParams, PenaltyWeights, UnseenAnnotator};
pub use train::{argmax3, evaluate_judgments, train, EpochStats, TrainConfig, TrainHistory};
