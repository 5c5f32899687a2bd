//! Downstream analyses: percentile grids, human embeddings from grid ratings,
//! mask-based group classification, binary AUC, external rating correlation
//! and attribute-disparity estimation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DemographicField, GridRating};
use crate::embedder::ModelParams;
use crate::stats::{self, Interval};
use crate::{par, Error, Result};

pub const GRID_COLUMNS: usize = 100;
pub const GRID_ROWS: usize = 5;
pub const MIN_GRID_STIMULI: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridColumn {
    /// Bin index `q` in 1..=100; bin `q` holds values in `[P^{q-1}, P^q)`.
    pub percentile: u8,
    /// Up to five members with the highest values, descending.
    pub stimuli: Vec<String>,
    /// Number of stimuli falling in the bin.
    pub candidates: usize,
    /// Mean rectified value over every stimulus in the bin.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dimension: usize,
    /// Left to right: q = 100 down to q = 1.
    pub columns: Vec<GridColumn>,
    /// `P^0 ..= P^100`.
    pub percentile_edges: Vec<f64>,
    /// Columns with fewer than five candidates.
    pub underfilled: Vec<u8>,
}

impl GridSpec {
    pub fn column(&self, q: u8) -> Option<&GridColumn> {
        if !(1..=GRID_COLUMNS as u8).contains(&q) {
            return None;
        }
        self.columns.get(GRID_COLUMNS - q as usize)
    }

    pub fn column_mean(&self, q: u8) -> Option<f64> {
        self.column(q).and_then(|c| c.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }

    pub fn from_json(s: &str) -> Result<GridSpec> {
        serde_json::from_str(s).map_err(|e| Error::Parse { file: "grid".into(), line: 1, message: e.to_string() })
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q / 100.0 * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Builds the 5 x 100 grid for dimension `dim` over `stimuli` (all model
/// stimuli when `None`).
pub fn build_grid(params: &ModelParams, dim: usize, stimuli: Option<&[String]>) -> Result<GridSpec> {
    if dim >= params.dims() {
        return Err(Error::InvalidArgument(format!("dimension {dim} out of range")));
    }
    let ids: Vec<String> = match stimuli {
        Some(s) => s.to_vec(),
        None => params.stimulus_ids().to_vec(),
    };
    if ids.len() < MIN_GRID_STIMULI {
        return Err(Error::Insufficient(format!(
            "grids need at least {MIN_GRID_STIMULI} stimuli, got {}",
            ids.len()
        )));
    }
    let values: Vec<(String, f64)> = ids
        .iter()
        .map(|id| Ok((id.clone(), params.embedding(id)?[dim].max(0.0))))
        .collect::<Result<_>>()?;
    let mut sorted: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if max <= 0.0 {
        return Err(Error::InvalidArgument(format!("dimension {dim} is pruned (all values zero)")));
    }
    if min == max {
        return Err(Error::Degenerate(format!("dimension {dim} is constant; percentile edges collapse")));
    }
    let edges: Vec<f64> = (0..=GRID_COLUMNS).map(|q| percentile(&sorted, q as f64)).collect();
    let mut bins: Vec<Vec<(String, f64)>> = vec![Vec::new(); GRID_COLUMNS];
    for (id, v) in values {
        // largest q with P^{q-1} <= v; the maximum lands in the top bin
        let q = edges[..GRID_COLUMNS].partition_point(|&e| e <= v).max(1);
        bins[q - 1].push((id, v));
    }
    let mut columns = Vec::with_capacity(GRID_COLUMNS);
    let mut underfilled = Vec::new();
    for q in (1..=GRID_COLUMNS).rev() {
        let bin = &mut bins[q - 1];
        bin.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mean = (!bin.is_empty()).then(|| bin.iter().map(|(_, v)| v).sum::<f64>() / bin.len() as f64);
        if bin.len() < GRID_ROWS {
            underfilled.push(q as u8);
        }
        columns.push(GridColumn {
            percentile: q as u8,
            stimuli: bin.iter().take(GRID_ROWS).map(|(id, _)| id.clone()).collect(),
            candidates: bin.len(),
            mean,
        });
    }
    Ok(GridSpec { dimension: dim, columns, percentile_edges: edges, underfilled })
}

/// Component `j` of a probe's vector is the mean of `mu_j^q` over that
/// probe's ratings on grid `j`; components follow the order of `grids`.
pub fn human_embedding_from_ratings(
    ratings: &[GridRating],
    grids: &[GridSpec],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let slot: HashMap<usize, usize> = grids.iter().enumerate().map(|(i, g)| (g.dimension, i)).collect();
    if slot.len() != grids.len() {
        return Err(Error::InvalidArgument("duplicate grid dimensions".into()));
    }
    let mut acc: BTreeMap<&str, Vec<(f64, usize)>> = BTreeMap::new();
    for r in ratings {
        r.validate()?;
        let &g = slot
            .get(&r.dimension)
            .ok_or_else(|| Error::UnknownId { kind: "grid dimension", id: r.dimension.to_string() })?;
        let mu = grids[g].column_mean(r.column_percentile).ok_or_else(|| {
            Error::Insufficient(format!(
                "grid {} column {} is empty; rating by {} cannot be scored",
                r.dimension, r.column_percentile, r.annotator_id
            ))
        })?;
        let e = acc.entry(&r.probe_stimulus).or_insert_with(|| vec![(0.0, 0); grids.len()]);
        e[g].0 += mu;
        e[g].1 += 1;
    }
    acc.into_iter()
        .map(|(probe, comps)| {
            let v = comps
                .iter()
                .enumerate()
                .map(|(g, &(s, n))| {
                    if n == 0 {
                        Err(Error::Insufficient(format!(
                            "probe {probe} has no rating on grid {}",
                            grids[g].dimension
                        )))
                    } else {
                        Ok(s / n as f64)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((probe.to_string(), v))
        })
        .collect()
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Insufficient("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the count of (pos > neg) pairs plus tied pairs, kept integral
    let mut twice: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok((twice as f64 / 2.0) / (pos * neg) as f64)
}

/// Class-weighted L2 logistic regression on standardized features.
struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    const L2: f64 = 1e-2;
    const ITERS: usize = 500;
    const LR: f64 = 0.5;

    fn fit(x: &[Vec<f64>], y: &[bool]) -> Logistic {
        let (n, d) = (x.len(), x[0].len());
        let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|k| {
                let v = x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n as f64;
                if v > 1e-24 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|k| (r[k] - mean[k]) / scale[k]).collect()).collect();
        let pos = y.iter().filter(|&&l| l).count() as f64;
        let cw = [n as f64 / (2.0 * (n as f64 - pos)), n as f64 / (2.0 * pos)];
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..Self::ITERS {
            let mut gw: Vec<f64> = w.iter().map(|wk| Self::L2 * wk).collect();
            let mut gb = 0.0;
            for (zi, &yi) in z.iter().zip(y) {
                let m = b + zi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let p = 1.0 / (1.0 + (-m).exp());
                let g = cw[yi as usize] * (p - yi as u8 as f64) / n as f64;
                gb += g;
                for k in 0..d {
                    gw[k] += g * zi[k];
                }
            }
            for k in 0..d {
                w[k] -= Self::LR * gw[k];
            }
            b -= Self::LR * gb;
        }
        Logistic { mean, scale, w, b }
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.b + (0..x.len()).map(|k| (x[k] - self.mean[k]) / self.scale[k] * self.w[k]).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAucReport {
    /// Positive class first.
    pub groups: [String; 2],
    pub group_sizes: [usize; 2],
    pub fold_aucs: Vec<f64>,
    pub auc: Interval,
}

/// Cross-validated separability of two annotator groups from their masks.
/// Annotators need at least `min_judgments` judgments in `corpus` and a
/// value for `field`; the two largest groups are kept (ties by name).
pub fn mask_group_auc(
    params: &ModelParams,
    corpus: &Corpus,
    field: DemographicField,
    min_judgments: usize,
    folds: usize,
    seed: u64,
) -> Result<MaskAucReport> {
    if !params.mode.is_conditional() {
        return Err(Error::Mode("mask classification needs a conditional model".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    let counts = corpus.judgments_per_annotator();
    let mut groups: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for a in &corpus.annotators {
        let Some(v) = a.field(field) else { continue };
        if counts.get(a.id.as_str()).copied().unwrap_or(0) < min_judgments {
            continue;
        }
        let Some(row) = params.annotator_row(&a.id) else { continue };
        groups.entry(v).or_default().push(params.mask_row(row));
    }
    let mut ranked: Vec<(&str, Vec<Vec<f64>>)> = groups.into_iter().collect();
    ranked.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(b.0)));
    if ranked.len() < 2 {
        return Err(Error::Insufficient(format!("need two groups, found {}", ranked.len())));
    }
    ranked.truncate(2);
    for (g, m) in &ranked {
        if m.len() < folds {
            return Err(Error::Insufficient(format!("group {g} has {} annotators, fewer than {folds} folds", m.len())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (features, label, fold)
    let mut rows: Vec<(Vec<f64>, bool, usize)> = Vec::new();
    for (class, (_, members)) in ranked.iter().enumerate() {
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.shuffle(&mut rng);
        for (pos, &i) in order.iter().enumerate() {
            rows.push((members[i].clone(), class == 0, pos % folds));
        }
    }
    let fold_aucs = par::map_range(folds, |f| {
        let (train, test): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.2 != f);
        let x: Vec<Vec<f64>> = train.iter().map(|r| r.0.clone()).collect();
        let y: Vec<bool> = train.iter().map(|r| r.1).collect();
        let model = Logistic::fit(&x, &y);
        let s: Vec<f64> = test.iter().map(|r| model.score(&r.0)).collect();
        let l: Vec<bool> = test.iter().map(|r| r.1).collect();
        binary_auc(&s, &l)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MaskAucReport {
        groups: [ranked[0].0.to_string(), ranked[1].0.to_string()],
        group_sizes: [ranked[0].1.len(), ranked[1].1.len()],
        auc: stats::ci95(&fold_aucs)?,
        fold_aucs,
    })
}

/// Rectified values of one dimension, in model stimulus order.
pub fn dimension_values(params: &ModelParams, dim: usize) -> Result<Vec<(String, f64)>> {
    if dim >= params.dims() {
        return Err(Error::InvalidArgument(format!("dimension {dim} out of range")));
    }
    Ok(params
        .stimulus_ids()
        .iter()
        .zip(params.w.column(dim))
        .map(|(id, &v)| (id.clone(), v.max(0.0)))
        .collect())
}

/// Spearman r between dimension values and external ratings, paired by id.
/// Every rated stimulus must have a dimension value.
pub fn external_rating_correlation(dim_values: &[(String, f64)], external: &[(String, f64)]) -> Result<f64> {
    let map: HashMap<&str, f64> = dim_values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let mut seen = HashSet::new();
    let mut x = Vec::with_capacity(external.len());
    let mut y = Vec::with_capacity(external.len());
    for (id, v) in external {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId { kind: "external rating", id: id.clone() });
        }
        let d = map.get(id.as_str()).ok_or_else(|| Error::UnknownId { kind: "stimulus", id: id.clone() })?;
        x.push(*d);
        y.push(*v);
    }
    if x.len() < 3 {
        return Err(Error::Insufficient(format!("need at least 3 paired values, got {}", x.len())));
    }
    stats::spearman(&x, &y)
}

#[derive(Debug, Deserialize)]
struct ExternalRow {
    stimulus_id: String,
    value: f64,
}

/// Reads `stimulus_id,value` rows with a header line.
pub fn load_external_ratings(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    rdr.deserialize::<ExternalRow>()
        .enumerate()
        .map(|(i, r)| {
            r.map(|r| (r.stimulus_id, r.value)).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    /// (stimulus id, binary label).
    pub members: Vec<(String, bool)>,
}

impl SubsetSpec {
    /// Fraction of members labelled 0.
    pub fn r(&self) -> f64 {
        self.members.iter().filter(|m| !m.1).count() as f64 / self.members.len() as f64
    }

    /// `|2r - 1|`, from integer counts so that `r` and `1 - r` tie exactly.
    pub fn disparity(&self) -> f64 {
        let zeros = self.members.iter().filter(|m| !m.1).count();
        (2 * zeros).abs_diff(self.members.len()) as f64 / self.members.len() as f64
    }
}

pub const DEFAULT_DISPARITY_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub estimates: Vec<f64>,
    pub ground_truth: Vec<f64>,
    pub selected: usize,
    /// `None` when either series is constant.
    pub spearman: Option<f64>,
}

/// Mean of `K_ij = min(|y_i - y_j|^-1, cap)` over all ordered member pairs,
/// diagonal included.
pub fn subset_homogeneity(scores: &[f64], cap: f64) -> f64 {
    let m = scores.len();
    let mut s = 0.0;
    for &a in scores {
        for &b in scores {
            let d = (a - b).abs();
            s += if d == 0.0 { cap } else { (1.0 / d).min(cap) };
        }
    }
    s / (m * m) as f64
}

pub fn disparity_estimate(scores: &[(String, f64)], subsets: &[SubsetSpec], cap: f64) -> Result<DisparityReport> {
    if !(cap > 0.0) {
        return Err(Error::InvalidArgument("cap must be positive".into()));
    }
    if subsets.is_empty() {
        return Err(Error::InvalidArgument("no subsets".into()));
    }
    let map: HashMap<&str, f64> = scores.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let member_scores: Vec<Vec<f64>> = subsets
        .iter()
        .enumerate()
        .map(|(c, s)| {
            if s.members.len() < 2 {
                return Err(Error::Insufficient(format!("subset {c} has fewer than 2 members")));
            }
            s.members
                .iter()
                .map(|(id, _)| map.get(id.as_str()).copied().ok_or_else(|| Error::UnknownId { kind: "stimulus", id: id.clone() }))
                .collect()
        })
        .collect::<Result<_>>()?;
    let estimates = par::map(&member_scores, |s| subset_homogeneity(s, cap));
    let ground_truth: Vec<f64> = subsets.iter().map(SubsetSpec::disparity).collect();
    let mut selected = 0;
    for (c, &e) in estimates.iter().enumerate() {
        if e < estimates[selected] {
            selected = c;
        }
    }
    let spearman = stats::spearman(&estimates, &ground_truth).ok();
    Ok(DisparityReport { estimates, ground_truth, selected, spearman })
}
