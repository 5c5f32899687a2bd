//! Dimension retention after training and cross-run dimension matching.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::JudgmentRecord;
use crate::embedder::ModelParams;
use crate::evaluator::accuracy;
use crate::stats;
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub retained_dims: Vec<usize>,
    pub threshold: f64,
    pub val_accuracy: f64,
}

impl PruneResult {
    pub fn to_csv(&self) -> String {
        let dims: Vec<String> = self.retained_dims.iter().map(|d| d.to_string()).collect();
        format!(
            "threshold,val_accuracy,retained_count,retained_dims\n{},{},{},{}\n",
            self.threshold,
            self.val_accuracy,
            self.retained_dims.len(),
            dims.join(" ")
        )
    }
}

/// 21 thresholds, four per decade, from 1e-6 to 1e-1.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=20).map(|k| 10f64.powf(-6.0 + k as f64 * 0.25)).collect()
}

/// Largest rectified value of each dimension over stimuli.
pub fn dimension_maxima(params: &ModelParams) -> Vec<f64> {
    params
        .w
        .columns()
        .into_iter()
        .map(|c| c.iter().fold(0.0f64, |m, &v| m.max(v)))
        .collect()
}

/// Dimensions whose maximum rectified value is at least `threshold`.
pub fn retained_at(params: &ModelParams, threshold: f64) -> Vec<usize> {
    dimension_maxima(params)
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= threshold && m > 0.0)
        .map(|(j, _)| j)
        .collect()
}

/// Picks the threshold maximising validation accuracy; ties prefer fewer
/// dimensions (larger threshold).
pub fn prune_dimensions(
    params: &ModelParams,
    validation: &[JudgmentRecord],
    threshold_grid: &[f64],
) -> Result<PruneResult> {
    if threshold_grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut grid = threshold_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let candidates: Vec<(f64, Vec<usize>)> = grid
        .iter()
        .map(|&t| (t, retained_at(params, t)))
        .filter(|(_, r)| !r.is_empty())
        .collect();
    if candidates.is_empty() {
        return Err(Error::Degenerate("every threshold prunes all dimensions".into()));
    }
    let scores: Vec<Result<f64>> = par::map(&candidates, |(_, keep)| {
        accuracy(&params.with_dims_zeroed_except(keep), validation)
    });
    let mut best: Option<PruneResult> = None;
    for ((t, keep), s) in candidates.into_iter().zip(scores) {
        let s = s?;
        if best.as_ref().is_none_or(|b| s >= b.val_accuracy) {
            best = Some(PruneResult { retained_dims: keep, threshold: t, val_accuracy: s });
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionMatch {
    pub dim_a: usize,
    pub dim_b: usize,
    pub pearson: f64,
    pub spearman: f64,
}

pub fn matches_csv(m: &[DimensionMatch]) -> String {
    let mut s = String::from("dim_a,dim_b,pearson,spearman\n");
    for d in m {
        let _ = writeln!(s, "{},{},{},{}", d.dim_a, d.dim_b, d.pearson, d.spearman);
    }
    s
}

/// For every dimension of `run_a` with a nonzero rectified value, the
/// dimension of `run_b` with the highest Pearson r over stimuli.
pub fn match_dimensions(run_a: &ModelParams, run_b: &ModelParams) -> Result<Vec<DimensionMatch>> {
    let mut sa: Vec<&String> = run_a.stimulus_ids().iter().collect();
    let mut sb: Vec<&String> = run_b.stimulus_ids().iter().collect();
    sa.sort();
    sb.sort();
    if sa != sb {
        return Err(Error::InvalidArgument("runs cover different stimulus sets".into()));
    }
    let ra = run_a.rectified();
    let rb = run_b.rectified();
    // align run_b rows to run_a ordering
    let rows_b: Vec<usize> = run_a
        .stimulus_ids()
        .iter()
        .map(|id| run_b.stimulus_row(id))
        .collect::<Result<_>>()?;
    let cols_b: Vec<Vec<f64>> = (0..run_b.dims())
        .map(|k| rows_b.iter().map(|&r| rb[[r, k]]).collect())
        .collect();
    let live_b: Vec<usize> = (0..run_b.dims()).filter(|&k| cols_b[k].iter().any(|&v| v > 0.0)).collect();
    let mut out = Vec::new();
    for j in 0..run_a.dims() {
        let col: Vec<f64> = ra.column(j).to_vec();
        if !col.iter().any(|&v| v > 0.0) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &k in &live_b {
            let Ok(r) = stats::pearson(&col, &cols_b[k]) else { continue };
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((k, r));
            }
        }
        if let Some((k, r)) = best {
            let rho = stats::spearman(&col, &cols_b[k]).unwrap_or(f64::NAN);
            out.push(DimensionMatch { dim_a: j, dim_b: k, pearson: r, spearman: rho });
        }
    }
    Ok(out)
}

/// Median of the best-match Pearson values.
pub fn median_match(m: &[DimensionMatch]) -> Option<f64> {
    if m.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = m.iter().map(|d| d.pearson).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
