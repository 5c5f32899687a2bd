//! Ground-truth synthetic worlds.
//!
//! A world holds non-negative sparse embeddings and per-annotator masks in
//! `[0, 1]`. Judgments are drawn from the exact choice distribution of the
//! model, so every downstream estimate has a closed-form target.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Annotator, Corpus, JudgmentRecord, Stimulus};
use crate::sampler::TripletKey;
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub stimuli: usize,
    pub annotators: usize,
    pub dims: usize,
    /// Fraction of embedding entries that are exactly zero.
    pub sparsity: f64,
    /// Nonzero entries are drawn from `U[0.25, 1] * value_scale`.
    pub value_scale: f64,
    /// Number of annotator populations. Population `p` attends fully to
    /// dimensions `k` with `k % populations == p` and scales the rest by
    /// `1 - population_separation`.
    pub populations: usize,
    pub population_separation: f64,
    /// Per-annotator uniform jitter added to the population mask.
    pub mask_jitter: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(stimuli: usize, annotators: usize, dims: usize, sparsity: f64, seed: u64) -> Self {
        WorldConfig {
            stimuli,
            annotators,
            dims,
            sparsity,
            value_scale: 1.0,
            populations: 1,
            population_separation: 0.0,
            mask_jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stimuli < 3 || self.annotators < 1 || self.dims < 1 {
            return Err(Error::InvalidArgument("worlds need N >= 3, A >= 1, d >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidArgument("sparsity must be in [0, 1)".into()));
        }
        if !(self.value_scale > 0.0) || self.populations == 0 || self.populations > self.annotators {
            return Err(Error::InvalidArgument(
                "value_scale must be positive and 1 <= populations <= annotators".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.population_separation) || !(0.0..=1.0).contains(&self.mask_jitter) {
            return Err(Error::InvalidArgument("separation and jitter must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub stimulus_ids: Vec<String>,
    pub annotator_ids: Vec<String>,
    pub population: Vec<usize>,
    pub true_w: Array2<f64>,
    pub true_masks: Array2<f64>,
}

/// Generates a deterministic world. Every dimension has at least one entry
/// of at least `0.25 * value_scale`.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, a, d) = (config.stimuli, config.annotators, config.dims);
    let mut w = Array2::zeros((n, d));
    for v in w.iter_mut() {
        if rng.random::<f64>() >= config.sparsity {
            *v = rng.random_range(0.25..=1.0) * config.value_scale;
        }
    }
    for k in 0..d {
        if w.column(k).iter().all(|&v| v == 0.0) {
            let r = rng.random_range(0..n);
            w[[r, k]] = rng.random_range(0.25..=1.0) * config.value_scale;
        }
    }
    let population: Vec<usize> = (0..a).map(|i| i % config.populations).collect();
    let mut masks = Array2::zeros((a, d));
    for i in 0..a {
        for k in 0..d {
            let base = if config.populations == 1 || k % config.populations == population[i] {
                1.0
            } else {
                1.0 - config.population_separation
            };
            let jitter = if config.mask_jitter > 0.0 {
                rng.random_range(-config.mask_jitter..=config.mask_jitter)
            } else {
                0.0
            };
            masks[[i, k]] = f64::clamp(base + jitter, 0.0, 1.0);
        }
    }
    Ok(SyntheticWorld {
        config: config.clone(),
        stimulus_ids: (0..n).map(|i| format!("s{i:04}")).collect(),
        annotator_ids: (0..a).map(|i| format!("a{i:03}")).collect(),
        population,
        true_w: w,
        true_masks: masks,
    })
}

/// How sampled judgments are attributed to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorAssignment {
    /// Judgment `r` of triplet `t` goes to annotator `(t * per_triplet + r) % A`.
    RoundRobin,
    UniformRandom,
    /// Always the given annotator row.
    Fixed(usize),
}

impl SyntheticWorld {
    fn row(&self, id: &str) -> Result<usize> {
        self.stimulus_ids
            .binary_search_by(|s| s.as_str().cmp(id))
            .map_err(|_| Error::UnknownId { kind: "stimulus", id: id.to_string() })
    }

    pub fn annotator_row(&self, id: &str) -> Result<usize> {
        self.annotator_ids
            .binary_search_by(|s| s.as_str().cmp(id))
            .map_err(|_| Error::UnknownId { kind: "annotator", id: id.to_string() })
    }

    /// Ground-truth choice distribution for annotator row `a`.
    pub fn probabilities(&self, a: usize, rows: [usize; 3]) -> [f64; 3] {
        let m = self.true_masks.row(a);
        let sim = |x: usize, y: usize| -> f64 {
            let (wx, wy) = (self.true_w.row(x), self.true_w.row(y));
            (0..self.config.dims).map(|k| m[k] * wx[k] * m[k] * wy[k]).sum()
        };
        let l = [sim(rows[1], rows[2]), sim(rows[0], rows[2]), sim(rows[0], rows[1])];
        let mx = l[0].max(l[1]).max(l[2]);
        let e = l.map(|v| (v - mx).exp());
        let z = e[0] + e[1] + e[2];
        e.map(|v| v / z)
    }

    pub fn probabilities_for(&self, annotator: &str, triplet: &[String; 3]) -> Result<[f64; 3]> {
        let a = self.annotator_row(annotator)?;
        Ok(self.probabilities(a, [self.row(&triplet[0])?, self.row(&triplet[1])?, self.row(&triplet[2])?]))
    }

    /// Corpus wrapper. Each annotator's population is written to the
    /// `ancestry` field as `pop{p}`.
    pub fn corpus(&self, judgments: Vec<JudgmentRecord>) -> Corpus {
        Corpus {
            stimuli: self
                .stimulus_ids
                .iter()
                .map(|id| Stimulus { id: id.clone(), source_ref: format!("{id}.png"), attributes: None })
                .collect(),
            annotators: self
                .annotator_ids
                .iter()
                .zip(&self.population)
                .map(|(id, p)| Annotator { id: id.clone(), ancestry: Some(format!("pop{p}")), ..Default::default() })
                .collect(),
            judgments,
            ..Default::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::InvalidRecord(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SyntheticWorld> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Parse { file: path.display().to_string(), line: 1, message: e.to_string() })
    }
}

fn draw(p: [f64; 3], u: f64) -> u8 {
    if u < p[0] {
        0
    } else if u < p[0] + p[1] {
        1
    } else {
        2
    }
}

/// Draws `per_triplet` judgments for each triplet from the exact choice
/// distribution, each with a uniform random display order. Each triplet uses its
/// own ChaCha8 stream, so output is independent of thread count.
pub fn sample_judgments(
    world: &SyntheticWorld,
    triplets: &[TripletKey],
    per_triplet: usize,
    assignment: &AnnotatorAssignment,
    seed: u64,
) -> Result<Vec<JudgmentRecord>> {
    if per_triplet == 0 {
        return Err(Error::InvalidArgument("per_triplet must be >= 1".into()));
    }
    let n_ann = world.annotator_ids.len();
    if let AnnotatorAssignment::Fixed(a) = assignment {
        if *a >= n_ann {
            return Err(Error::InvalidArgument(format!("annotator row {a} out of range")));
        }
    }
    let rows: Vec<[usize; 3]> = triplets
        .iter()
        .map(|k| {
            let ids = k.ids();
            Ok([world.row(&ids[0])?, world.row(&ids[1])?, world.row(&ids[2])?])
        })
        .collect::<Result<_>>()?;
    let per: Vec<Vec<JudgmentRecord>> = par::map_range(triplets.len(), |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        (0..per_triplet)
            .map(|r| {
                let a = match assignment {
                    AnnotatorAssignment::RoundRobin => (t * per_triplet + r) % n_ann,
                    AnnotatorAssignment::UniformRandom => rng.random_range(0..n_ann),
                    AnnotatorAssignment::Fixed(a) => *a,
                };
                let p = world.probabilities(a, rows[t]);
                let mut shown = [0u8, 1, 2];
                shown.shuffle(&mut rng);
                JudgmentRecord {
                    triplet: triplets[t].ids().clone(),
                    odd_one_out: draw(p, rng.random::<f64>()),
                    annotator_id: world.annotator_ids[a].clone(),
                    response_ms: None,
                    position_shown: Some(shown),
                }
            })
            .collect()
    });
    Ok(per.into_iter().flatten().collect())
}

/// Mean over triplets of the largest ground-truth probability, averaged
/// uniformly over annotators.
pub fn oracle_ceiling(world: &SyntheticWorld, triplets: &[TripletKey]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("oracle ceiling needs triplets".into()));
    }
    let n_ann = world.annotator_ids.len();
    let vals: Vec<Result<f64>> = par::map(triplets, |k| {
        let ids = k.ids();
        let rows = [world.row(&ids[0])?, world.row(&ids[1])?, world.row(&ids[2])?];
        let s: f64 = (0..n_ann)
            .map(|a| world.probabilities(a, rows).iter().copied().fold(0.0, f64::max))
            .sum();
        Ok(s / n_ann as f64)
    });
    let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Expected accuracy of the Bayes predictor on these judgments: mean of the
/// largest ground-truth probability under each judgment's annotator.
pub fn oracle_ceiling_for_judgments(world: &SyntheticWorld, judgments: &[JudgmentRecord]) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::InvalidArgument("oracle ceiling needs judgments".into()));
    }
    let vals: Vec<Result<f64>> = par::map(judgments, |j| {
        Ok(world.probabilities_for(&j.annotator_id, &j.triplet)?.iter().copied().fold(0.0, f64::max))
    });
    let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}
