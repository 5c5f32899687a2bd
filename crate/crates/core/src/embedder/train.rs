use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::model::{batch_gradients, resolve_batch, ResolvedJudgment};
use super::params::{Mode, ModelParams, PenaltyWeights};
use crate::corpus::{Corpus, JudgmentRecord};
use crate::par;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dims: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub penalties: PenaltyWeights,
    pub seed: u64,
    /// Keep `W` fixed; implied by mode CPH.
    pub freeze_embeddings: bool,
    /// Initial embedding entries are drawn from `U[0, init_scale]`.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::U,
            dims: 128,
            epochs: 40,
            batch_size: 128,
            learning_rate: 0.001,
            penalties: PenaltyWeights::default(),
            seed: 0,
            freeze_embeddings: false,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.dims == 0 {
            return Err(Error::InvalidArgument("epochs, batch_size and dims must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::InvalidArgument("init_scale must be >= 0".into()));
        }
        self.penalties.validate()
    }

    fn frozen(&self) -> bool {
        self.freeze_embeddings || self.mode == Mode::Cph
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Objective per training judgment, penalties included.
    pub train_loss: f64,
    /// Mean negative log-likelihood per validation judgment.
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, opt(e.val_loss), opt(e.val_accuracy));
        }
        s
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax3(p: [f64; 3]) -> usize {
    let mut best = 0;
    for t in 1..3 {
        if p[t] > p[best] {
            best = t;
        }
    }
    best
}

/// Mean negative log-likelihood and 3AFC accuracy. Unknown annotators use
/// the model's [`super::UnseenAnnotator`] policy.
pub fn evaluate_judgments(params: &ModelParams, judgments: &[JudgmentRecord]) -> Result<(f64, f64)> {
    if judgments.is_empty() {
        return Err(Error::InvalidArgument("no judgments to evaluate".into()));
    }
    let per: Vec<Result<(f64, bool)>> = par::map(judgments, |j| {
        let p = params.odd_one_out_probs(
            Some(&j.annotator_id),
            [&j.triplet[0], &j.triplet[1], &j.triplet[2]],
        )?;
        let o = j.odd_one_out as usize;
        Ok((-p[o].ln(), argmax3(p) == o))
    });
    let (mut nll, mut hits) = (0.0, 0usize);
    for r in per {
        let (l, h) = r?;
        nll += l;
        hits += h as usize;
    }
    let n = judgments.len() as f64;
    Ok((nll / n, hits as f64 / n))
}

fn training_annotators(corpus: &Corpus) -> Vec<String> {
    let present: std::collections::HashSet<&str> =
        corpus.judgments.iter().map(|j| j.annotator_id.as_str()).collect();
    let mut out: Vec<String> = corpus
        .annotators
        .iter()
        .filter(|a| present.contains(a.id.as_str()))
        .map(|a| a.id.clone())
        .collect();
    // judgments may name annotators missing from the listing
    let listed: std::collections::HashSet<&str> = out.iter().map(String::as_str).collect();
    let mut extra: Vec<String> = present
        .iter()
        .filter(|a| !listed.contains(**a))
        .map(|a| a.to_string())
        .collect();
    extra.sort();
    out.extend(extra);
    out
}

fn initial_params(
    train: &Corpus,
    config: &TrainConfig,
    warm_start: Option<&ModelParams>,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    let annotators = if config.mode.is_conditional() {
        training_annotators(train)
    } else {
        Vec::new()
    };
    match (config.mode, warm_start) {
        (Mode::Cph, None) => Err(Error::Mode(
            "mode cph needs a warm start from an unconditional checkpoint".into(),
        )),
        (Mode::Cph, Some(warm)) => {
            let mut p = warm.into_post_hoc(annotators)?;
            p.penalties = config.penalties;
            Ok(p)
        }
        (mode, Some(warm)) => {
            let d = warm.dims();
            let mut phi = Array2::zeros((annotators.len(), d));
            for (r, a) in annotators.iter().enumerate() {
                if let Some(src) = warm.annotator_row(a) {
                    phi.row_mut(r).assign(&warm.phi.row(src));
                }
            }
            ModelParams::new(
                mode,
                warm.stimulus_ids().to_vec(),
                annotators,
                warm.w.clone(),
                phi,
                config.penalties,
            )
        }
        (mode, None) => {
            let n = train.stimuli.len();
            let d = config.dims;
            let scale = config.init_scale;
            let w = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * scale);
            let phi = Array2::zeros((annotators.len(), d));
            ModelParams::new(mode, train.stimulus_ids(), annotators, w, phi, config.penalties)
        }
    }
}

/// Fits the model with Adam over shuffled mini-batches.
///
/// The run is deterministic given `config.seed`: initial values are drawn
/// first from a ChaCha8 stream, followed by one shuffle of the training
/// judgments per epoch.
pub fn train(
    train: &Corpus,
    validation: Option<&Corpus>,
    config: &TrainConfig,
    warm_start: Option<&ModelParams>,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if train.judgments.is_empty() {
        return Err(Error::InvalidArgument("training corpus has no judgments".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initial_params(train, config, warm_start, &mut rng)?;
    let resolved = resolve_batch(&params, &train.judgments)?;
    let frozen = config.frozen();
    let conditional = params.mode.is_conditional();

    let mut adam_w = Adam::new(config.learning_rate, params.w.len());
    let mut adam_phi = Adam::new(config.learning_rate, params.phi.len());
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    let mut history = TrainHistory::default();
    let mut batch: Vec<ResolvedJudgment> = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| resolved[i]));
            let g = batch_gradients(&params, &batch, &config.penalties, frozen)?;
            total += g.loss;
            if !frozen {
                let w = params.w.as_slice_mut().expect("standard layout");
                adam_w.step(w, g.dw.as_slice().expect("standard layout"));
            }
            if conditional && params.phi.nrows() > 0 {
                let phi = params.phi.as_slice_mut().expect("standard layout");
                adam_phi.step(phi, g.dphi.as_slice().expect("standard layout"));
            }
        }
        let (val_loss, val_accuracy) = match validation {
            Some(v) if !v.judgments.is_empty() => {
                let (l, a) = evaluate_judgments(&params, &v.judgments)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss: total / resolved.len() as f64,
            val_loss,
            val_accuracy,
        });
    }
    Ok((params, history))
}
