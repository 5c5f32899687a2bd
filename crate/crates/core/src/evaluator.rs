//! Behavioural evaluation protocols.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::JudgmentRecord;
use crate::embedder::{argmax3, ModelParams};
use crate::sampler::TripletKey;
use crate::stats::{self, Interval};
use crate::{par, Error, Result};

/// Votes for each member of a triplet (in key order) plus who cast them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoteCounts {
    pub counts: [u32; 3],
    pub annotators: Vec<String>,
}

impl VoteCounts {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn fractions(&self) -> [f64; 3] {
        let n = self.total() as f64;
        self.counts.map(|c| c as f64 / n)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletVoteTable {
    pub entries: BTreeMap<TripletKey, VoteCounts>,
}

impl TripletVoteTable {
    pub fn from_judgments(judgments: &[JudgmentRecord]) -> Result<Self> {
        let mut entries: BTreeMap<TripletKey, VoteCounts> = BTreeMap::new();
        for j in judgments {
            j.validate()?;
            let key = TripletKey::from_ids(&j.triplet)?;
            let chosen = &j.triplet[j.odd_one_out as usize];
            let pos = key.ids().iter().position(|s| s == chosen).unwrap();
            let e = entries.entry(key).or_default();
            e.counts[pos] += 1;
            e.annotators.push(j.annotator_id.clone());
        }
        Ok(TripletVoteTable { entries })
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (TripletKey, [u32; 3])>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, c) in counts {
            if c.iter().sum::<u32>() == 0 {
                return Err(Error::InvalidRecord(format!("triplet {:?} has no votes", k.ids())));
            }
            entries.insert(k, VoteCounts { counts: c, annotators: Vec::new() });
        }
        Ok(TripletVoteTable { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contexts(&self) -> Vec<TripletContext> {
        self.entries
            .iter()
            .map(|(k, v)| {
                let mut judges = v.annotators.clone();
                judges.sort();
                judges.dedup();
                TripletContext { key: k.clone(), judges }
            })
            .collect()
    }
}

/// A triplet and the annotators whose judgments mention it.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletContext {
    pub key: TripletKey,
    pub judges: Vec<String>,
}

impl From<TripletKey> for TripletContext {
    fn from(key: TripletKey) -> Self {
        TripletContext { key, judges: Vec::new() }
    }
}

/// Which mask scores a triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorPolicy {
    /// No annotator: all-ones mask in mode U, population mean otherwise.
    Unconditional,
    Fixed(String),
    /// Probabilities averaged over the annotators who judged the triplet.
    JudgesOfTriplet,
}

fn context_probs(params: &ModelParams, ctx: &TripletContext, policy: &AnnotatorPolicy) -> Result<[f64; 3]> {
    let ids = ctx.key.ids();
    let t = [ids[0].as_str(), ids[1].as_str(), ids[2].as_str()];
    match policy {
        AnnotatorPolicy::Unconditional => params.odd_one_out_probs(None, t),
        AnnotatorPolicy::Fixed(a) => params.odd_one_out_probs(Some(a), t),
        AnnotatorPolicy::JudgesOfTriplet => {
            if ctx.judges.is_empty() || !params.mode.is_conditional() {
                return params.odd_one_out_probs(None, t);
            }
            let mut acc = [0.0; 3];
            for a in &ctx.judges {
                let p = params.odd_one_out_probs(Some(a), t)?;
                for k in 0..3 {
                    acc[k] += p[k];
                }
            }
            let n = ctx.judges.len() as f64;
            Ok(acc.map(|v| v / n))
        }
    }
}

/// Predicted odd-one-out position; ties go to the lowest position.
pub fn predict_odd_one_out(params: &ModelParams, annotator: Option<&str>, triplet: [&str; 3]) -> Result<usize> {
    Ok(argmax3(params.odd_one_out_probs(annotator, triplet)?))
}

/// Fraction of judgments whose human choice equals the model's prediction.
/// Each judgment is scored with its own annotator's mask.
pub fn accuracy(params: &ModelParams, judgments: &[JudgmentRecord]) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::InvalidArgument("accuracy needs at least one judgment".into()));
    }
    let hits = par::map(judgments, |j| {
        predict_odd_one_out(params, Some(&j.annotator_id), [&j.triplet[0], &j.triplet[1], &j.triplet[2]])
            .map(|p| p == j.odd_one_out as usize)
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / judgments.len() as f64)
}

/// Mean majority-vote probability over triplets.
pub fn bayes_accuracy(votes: &TripletVoteTable) -> Result<f64> {
    if votes.is_empty() {
        return Err(Error::InvalidArgument("empty vote table".into()));
    }
    let mut sum = 0.0;
    for (k, v) in &votes.entries {
        let n = v.total();
        if n == 0 {
            return Err(Error::InvalidRecord(format!("triplet {:?} has no votes", k.ids())));
        }
        sum += *v.counts.iter().max().unwrap() as f64 / n as f64;
    }
    Ok(sum / votes.len() as f64)
}

/// Spearman correlation between per-triplet entropies of vote fractions and
/// of model probabilities. Constant entropies on either side are reported
/// as [`Error::Degenerate`].
pub fn entropy_correlation(
    votes: &TripletVoteTable,
    params: &ModelParams,
    policy: &AnnotatorPolicy,
) -> Result<f64> {
    if votes.len() < 2 {
        return Err(Error::Insufficient("entropy correlation needs at least 2 triplets".into()));
    }
    let ctx = votes.contexts();
    let model: Vec<Result<f64>> = par::map(&ctx, |c| context_probs(params, c, policy).map(|p| stats::entropy(&p)));
    let model = model.into_iter().collect::<Result<Vec<_>>>()?;
    let human: Vec<f64> = votes.entries.values().map(|v| stats::entropy(&v.fractions())).collect();
    stats::spearman(&human, &model)
}

/// Symmetric matrix over an ordered stimulus list; the diagonal is unused
/// and kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub stimuli: Vec<String>,
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.stimuli.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.values[[i, j]]);
            }
        }
        out
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.stimuli.iter().position(|s| s == a)?;
        let j = self.stimuli.iter().position(|s| s == b)?;
        Some(self.values[[i, j]])
    }

    /// CSV with a header row of stimulus ids.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stimulus");
        for id in &self.stimuli {
            let _ = write!(s, ",{id}");
        }
        s.push('\n');
        for (i, id) in self.stimuli.iter().enumerate() {
            s.push_str(id);
            for j in 0..self.stimuli.len() {
                let _ = write!(s, ",{}", self.values[[i, j]]);
            }
            s.push('\n');
        }
        s
    }
}

/// Accumulates per-pair numerators and denominators over triplets.
struct PairAccumulator {
    index: HashMap<String, usize>,
    stimuli: Vec<String>,
    num: Array2<f64>,
    den: Array2<f64>,
}

impl PairAccumulator {
    fn new<'a>(keys: impl Iterator<Item = &'a TripletKey>) -> Self {
        let set: BTreeSet<&str> = keys.flat_map(|k| k.ids().iter().map(String::as_str)).collect();
        let stimuli: Vec<String> = set.into_iter().map(String::from).collect();
        let index = stimuli.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let n = stimuli.len();
        PairAccumulator {
            index,
            stimuli,
            num: Array2::zeros((n, n)),
            den: Array2::zeros((n, n)),
        }
    }

    /// `weight[t]` is credited to the pair that excludes position `t`.
    fn add(&mut self, key: &TripletKey, survive: [f64; 3], total: f64) {
        let r = key.ids().clone().map(|s| self.index[&s]);
        for (t, (a, b)) in [(0usize, (1usize, 2usize)), (1, (0, 2)), (2, (0, 1))] {
            let (i, j) = (r[a], r[b]);
            self.num[[i, j]] += survive[t];
            self.num[[j, i]] += survive[t];
            self.den[[i, j]] += total;
            self.den[[j, i]] += total;
        }
    }

    fn finish(self) -> Result<SimilarityMatrix> {
        let n = self.stimuli.len();
        let mut values = Array2::zeros((n, n));
        let mut missing = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.den[[i, j]] == 0.0 {
                    missing.push(format!("({}, {})", self.stimuli[i], self.stimuli[j]));
                    continue;
                }
                let v = self.num[[i, j]] / self.den[[i, j]];
                values[[i, j]] = v;
                values[[j, i]] = v;
            }
        }
        if !missing.is_empty() {
            return Err(Error::Insufficient(format!("uncovered pairs: {}", missing.join(", "))));
        }
        Ok(SimilarityMatrix { stimuli: self.stimuli, values })
    }
}

/// Entry (i, j): fraction of judgments on triplets containing i and j in
/// which the third member was chosen.
pub fn similarity_matrix_human(votes: &TripletVoteTable) -> Result<SimilarityMatrix> {
    let mut acc = PairAccumulator::new(votes.entries.keys());
    for (k, v) in &votes.entries {
        acc.add(k, v.counts.map(|c| c as f64), v.total() as f64);
    }
    acc.finish()
}

/// Entry (i, j): mean model probability that the third member is the odd
/// one out, over the given triplets containing i and j.
pub fn similarity_matrix_model(
    params: &ModelParams,
    triplets: &[TripletContext],
    policy: &AnnotatorPolicy,
) -> Result<SimilarityMatrix> {
    let probs: Vec<Result<[f64; 3]>> = par::map(triplets, |c| context_probs(params, c, policy));
    let mut acc = PairAccumulator::new(triplets.iter().map(|c| &c.key));
    for (c, p) in triplets.iter().zip(probs) {
        acc.add(&c.key, p?, 1.0);
    }
    acc.finish()
}

fn check_same_layout(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<()> {
    if a.stimuli != b.stimuli {
        return Err(Error::InvalidArgument(format!(
            "matrices differ in size or ordering ({} vs {} stimuli)",
            a.stimuli.len(),
            b.stimuli.len()
        )));
    }
    Ok(())
}

/// Spearman correlation of strictly upper triangles.
pub fn matrix_spearman(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<f64> {
    check_same_layout(a, b)?;
    stats::spearman(&a.upper_triangle(), &b.upper_triangle())
}

pub fn matrix_pearson(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<f64> {
    check_same_layout(a, b)?;
    stats::pearson(&a.upper_triangle(), &b.upper_triangle())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationPoint {
    pub dims_remaining: usize,
    pub accuracy: f64,
    /// Squared Pearson r between model and human upper triangles.
    pub variance_explained: Option<f64>,
}

pub fn elimination_csv(curve: &[EliminationPoint]) -> String {
    let mut s = String::from("dims_remaining,accuracy,variance_explained\n");
    for p in curve {
        let ve = p.variance_explained.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", p.dims_remaining, p.accuracy, ve);
    }
    s
}

/// Repeatedly zeroes each embedding's smallest nonzero rectified entry and
/// records accuracy (and variance explained when `votes` are given) until
/// every embedding has at most one nonzero entry.
pub fn dimension_elimination_curve(
    params: &ModelParams,
    judgments: &[JudgmentRecord],
    votes: Option<&TripletVoteTable>,
) -> Result<Vec<EliminationPoint>> {
    if judgments.is_empty() {
        return Err(Error::InvalidArgument("elimination needs judgments".into()));
    }
    let mut current = params.clone();
    current.w = params.rectified();
    let human = votes.map(similarity_matrix_human).transpose()?;
    let contexts = votes.map(|v| v.contexts());
    let nonzero = |p: &ModelParams| -> usize {
        p.w.rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&v| v > 0.0).count())
            .max()
            .unwrap_or(0)
    };
    let mut curve = Vec::new();
    loop {
        let acc = accuracy(&current, judgments)?;
        let ve = match (&human, &contexts) {
            (Some(h), Some(ctx)) => {
                let m = similarity_matrix_model(&current, ctx, &AnnotatorPolicy::JudgesOfTriplet)?;
                Some(matrix_pearson(&m, h).map(|r| r * r).unwrap_or(0.0))
            }
            _ => None,
        };
        let remaining = nonzero(&current);
        curve.push(EliminationPoint { dims_remaining: remaining, accuracy: acc, variance_explained: ve });
        if remaining <= 1 {
            break;
        }
        for mut row in current.w.rows_mut() {
            let nz = row.iter().filter(|&&v| v > 0.0).count();
            if nz > 1 {
                let (k, _) = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.0)
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap();
                row[k] = 0.0;
            }
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub unswapped_accuracy: f64,
    pub swapped: Interval,
    pub repeats: Vec<f64>,
}

/// Accuracy after randomly permuting which annotator is attached to each
/// judgment, repeated `repeats` times.
pub fn annotator_swap_test(
    params: &ModelParams,
    judgments: &[JudgmentRecord],
    repeats: usize,
    seed: u64,
) -> Result<SwapReport> {
    if !params.mode.is_conditional() {
        return Err(Error::Mode("the swap test needs annotator masks (mode c or cph)".into()));
    }
    if repeats < 2 {
        return Err(Error::InvalidArgument("swap test needs at least 2 repeats".into()));
    }
    let unswapped = accuracy(params, judgments)?;
    let accs: Vec<Result<f64>> = par::map_range(repeats, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut annotators: Vec<&str> = judgments.iter().map(|j| j.annotator_id.as_str()).collect();
        annotators.shuffle(&mut rng);
        let swapped: Vec<JudgmentRecord> = judgments
            .iter()
            .zip(annotators)
            .map(|(j, a)| JudgmentRecord { annotator_id: a.to_string(), ..j.clone() })
            .collect();
        accuracy(params, &swapped)
    });
    let repeats = accs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SwapReport {
        unswapped_accuracy: unswapped,
        swapped: stats::ci95(&repeats)?,
        repeats,
    })
}
