//! Similarity, choice probabilities, objective and analytic gradients.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};

use super::params::{Mode, ModelParams, PenaltyWeights};
use crate::corpus::JudgmentRecord;
use crate::par;
use crate::{Error, Result};

/// `(m ⊙ relu(a))ᵀ (m ⊙ relu(b))`; `mask = None` means all ones.
pub fn masked_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, mask: Option<&[f64]>) -> f64 {
    match mask {
        None => a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| x.max(0.0) * y.max(0.0))
            .sum(),
        Some(m) => a
            .iter()
            .zip(b.iter())
            .zip(m)
            .map(|((&x, &y), &g)| (g * x.max(0.0)) * (g * y.max(0.0)))
            .sum(),
    }
}

/// Odd-one-out probabilities from the three pair similarities. Position
/// `t` is chosen with probability proportional to the exponentiated
/// similarity of the other two.
pub fn choice_probs(s_ij: f64, s_ik: f64, s_jk: f64) -> [f64; 3] {
    let logits = [s_jk, s_ik, s_ij];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - max).exp());
    let z = e[0] + e[1] + e[2];
    e.map(|v| v / z)
}

fn log_sum_exp(l: [f64; 3]) -> f64 {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl ModelParams {
    /// `s_a(i, j)`.
    pub fn similarity(&self, annotator: Option<&str>, i: &str, j: &str) -> Result<f64> {
        let mask = self.eval_mask(annotator)?;
        Ok(masked_similarity(self.embedding(i)?, self.embedding(j)?, mask.as_deref()))
    }

    /// Probabilities that each triplet member is the odd one out.
    pub fn odd_one_out_probs(&self, annotator: Option<&str>, triplet: [&str; 3]) -> Result<[f64; 3]> {
        let mask = self.eval_mask(annotator)?;
        let rows = self.triplet_rows(triplet)?;
        Ok(self.probs_rows(rows, mask.as_deref()))
    }

    pub(crate) fn triplet_rows(&self, triplet: [&str; 3]) -> Result<[usize; 3]> {
        if triplet[0] == triplet[1] || triplet[0] == triplet[2] || triplet[1] == triplet[2] {
            return Err(Error::InvalidRecord(format!("triplet ids must be distinct: {triplet:?}")));
        }
        Ok([
            self.stimulus_row(triplet[0])?,
            self.stimulus_row(triplet[1])?,
            self.stimulus_row(triplet[2])?,
        ])
    }

    pub(crate) fn probs_rows(&self, rows: [usize; 3], mask: Option<&[f64]>) -> [f64; 3] {
        let [a, b, c] = rows.map(|r| self.w.row(r));
        choice_probs(
            masked_similarity(a, b, mask),
            masked_similarity(a, c, mask),
            masked_similarity(b, c, mask),
        )
    }
}

/// A judgment resolved against model rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedJudgment {
    pub rows: [usize; 3],
    pub annotator: Option<usize>,
    pub choice: u8,
}

/// Resolves judgments for training: every stimulus must be known and, for
/// conditional models, every annotator too.
pub fn resolve_batch(params: &ModelParams, batch: &[JudgmentRecord]) -> Result<Vec<ResolvedJudgment>> {
    batch
        .iter()
        .map(|j| {
            j.validate()?;
            let rows = params.triplet_rows([&j.triplet[0], &j.triplet[1], &j.triplet[2]])?;
            let annotator = if params.mode.is_conditional() {
                Some(params.annotator_row(&j.annotator_id).ok_or_else(|| Error::UnknownId {
                    kind: "annotator",
                    id: j.annotator_id.clone(),
                })?)
            } else {
                None
            };
            Ok(ResolvedJudgment {
                rows,
                annotator,
                choice: j.odd_one_out,
            })
        })
        .collect()
}

/// Value of the objective on one batch together with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub nll: f64,
    pub dw: Array2<f64>,
    pub dphi: Array2<f64>,
}

struct JudgmentTerm {
    nll: f64,
    dw: [Vec<f64>; 3],
    dphi: Vec<f64>,
}

fn judgment_term(params: &ModelParams, j: &ResolvedJudgment, want_dw: bool, want_dphi: bool) -> JudgmentTerm {
    let d = params.dims();
    let mask: Option<Vec<f64>> = j.annotator.map(|a| params.mask_row(a));
    let r: [Vec<f64>; 3] = j.rows.map(|row| params.w.row(row).iter().map(|v| v.max(0.0)).collect());
    let m2: Vec<f64> = match &mask {
        Some(m) => m.iter().map(|g| g * g).collect(),
        None => vec![1.0; d],
    };
    let sim = |x: usize, y: usize| -> f64 {
        match &mask {
            Some(m) => (0..d).map(|k| (m[k] * r[x][k]) * (m[k] * r[y][k])).sum(),
            None => (0..d).map(|k| r[x][k] * r[y][k]).sum(),
        }
    };
    let logits = [sim(1, 2), sim(0, 2), sim(0, 1)];
    let lse = log_sum_exp(logits);
    let o = j.choice as usize;
    let nll = lse - logits[o];
    let mut g = logits.map(|l| (l - lse).exp());
    g[o] -= 1.0;

    let mut dw = [Vec::new(), Vec::new(), Vec::new()];
    if want_dw {
        // dL/dr_x = m² ⊙ Σ_y g_{other(x,y)} r_y
        let pairs = [(0usize, [(1usize, 2usize), (2, 1)]), (1, [(0, 2), (2, 0)]), (2, [(0, 1), (1, 0)])];
        for (x, partners) in pairs {
            // partner y contributes through logit of the third element z
            let [(y1, z1), (y2, z2)] = partners;
            let raw = params.w.row(j.rows[x]);
            dw[x] = (0..d)
                .map(|k| {
                    if raw[k] > 0.0 {
                        m2[k] * (g[z1] * r[y1][k] + g[z2] * r[y2][k])
                    } else {
                        0.0
                    }
                })
                .collect();
        }
    }
    let mut dphi = Vec::new();
    if want_dphi {
        if let Some(m) = &mask {
            dphi = (0..d)
                .map(|k| {
                    let cross = g[0] * r[1][k] * r[2][k] + g[1] * r[0][k] * r[2][k] + g[2] * r[0][k] * r[1][k];
                    2.0 * m[k] * m[k] * (1.0 - m[k]) * cross
                })
                .collect();
        }
    }
    JudgmentTerm { nll, dw, dphi }
}

const CHUNK: usize = 64;

fn batch_terms(
    params: &ModelParams,
    batch: &[ResolvedJudgment],
    want_dw: bool,
    want_dphi: bool,
) -> Vec<Vec<JudgmentTerm>> {
    par::map_chunks(batch, CHUNK, |chunk| {
        chunk
            .iter()
            .map(|j| judgment_term(params, j, want_dw, want_dphi))
            .collect()
    })
}

fn unique_rows(batch: &[ResolvedJudgment]) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut stim = BTreeSet::new();
    let mut ann = BTreeSet::new();
    for j in batch {
        stim.extend(j.rows);
        if let Some(a) = j.annotator {
            ann.insert(a);
        }
    }
    (stim, ann)
}

fn penalty_value(params: &ModelParams, batch: &[ResolvedJudgment], p: &PenaltyWeights) -> f64 {
    let (stim, ann) = unique_rows(batch);
    let mut l1 = 0.0;
    let mut neg = 0.0;
    for &s in &stim {
        for &v in params.w.row(s) {
            if v > 0.0 {
                l1 += v;
            } else {
                neg += -v;
            }
        }
    }
    let mut l2 = 0.0;
    if params.mode.is_conditional() {
        for &a in &ann {
            l2 += params.phi.row(a).iter().map(|v| v * v).sum::<f64>();
        }
    }
    p.alpha1 * l1 + p.alpha2 * neg + p.alpha3 * l2
}

/// Objective on a resolved batch.
pub fn batch_loss(params: &ModelParams, batch: &[ResolvedJudgment], penalties: &PenaltyWeights) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be non-empty".into()));
    }
    let nll: f64 = batch_terms(params, batch, false, false)
        .iter()
        .flatten()
        .map(|t| t.nll)
        .sum();
    Ok(nll + penalty_value(params, batch, penalties))
}

/// Objective and gradients on a resolved batch. With `freeze_embeddings`
/// (always in mode CPH) `dw` is identically zero.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[ResolvedJudgment],
    penalties: &PenaltyWeights,
    freeze_embeddings: bool,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be non-empty".into()));
    }
    let freeze = freeze_embeddings || params.mode == Mode::Cph;
    let conditional = params.mode.is_conditional();
    let d = params.dims();
    let mut dw = Array2::zeros(params.w.raw_dim());
    let mut dphi = Array2::zeros(params.phi.raw_dim());
    let mut nll = 0.0;

    let terms = batch_terms(params, batch, !freeze, conditional);
    for (t, j) in terms.iter().flatten().zip(batch) {
        nll += t.nll;
        if !freeze {
            for (x, &row) in j.rows.iter().enumerate() {
                let mut dst = dw.row_mut(row);
                for k in 0..d {
                    dst[k] += t.dw[x][k];
                }
            }
        }
        if let (Some(a), false) = (j.annotator, t.dphi.is_empty()) {
            let mut dst = dphi.row_mut(a);
            for k in 0..d {
                dst[k] += t.dphi[k];
            }
        }
    }

    let (stim, ann) = unique_rows(batch);
    if !freeze {
        for &s in &stim {
            for k in 0..d {
                let v = params.w[[s, k]];
                if v > 0.0 {
                    dw[[s, k]] += penalties.alpha1;
                } else if v < 0.0 {
                    dw[[s, k]] -= penalties.alpha2;
                }
            }
        }
    }
    if conditional {
        for &a in &ann {
            for k in 0..d {
                dphi[[a, k]] += 2.0 * penalties.alpha3 * params.phi[[a, k]];
            }
        }
    }
    let loss = nll + penalty_value(params, batch, penalties);
    Ok(Gradients { loss, nll, dw, dphi })
}

/// Objective on judgment records.
pub fn loss(params: &ModelParams, batch: &[JudgmentRecord], penalties: &PenaltyWeights) -> Result<f64> {
    let resolved = resolve_batch(params, batch)?;
    batch_loss(params, &resolved, penalties)
}

/// `(dW, dPhi)` on judgment records.
pub fn gradients(
    params: &ModelParams,
    batch: &[JudgmentRecord],
    penalties: &PenaltyWeights,
    freeze_embeddings: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let resolved = resolve_batch(params, batch)?;
    let g = batch_gradients(params, &resolved, penalties, freeze_embeddings)?;
    Ok((g.dw, g.dphi))
}
