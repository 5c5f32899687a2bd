use std::collections::HashMap;
use std::fmt;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Model family.
///
/// `U` ignores annotators (all-ones mask), `C` learns embeddings and masks
/// jointly, `Cph` learns masks against frozen unconditional embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    U,
    C,
    Cph,
}

impl Mode {
    pub fn is_conditional(self) -> bool {
        !matches!(self, Mode::U)
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "u" => Ok(Mode::U),
            "c" => Ok(Mode::C),
            "cph" => Ok(Mode::Cph),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Mode::U => 0,
            Mode::C => 1,
            Mode::Cph => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Mode> {
        match c {
            0 => Some(Mode::U),
            1 => Some(Mode::C),
            2 => Some(Mode::Cph),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::U => "u",
            Mode::C => "c",
            Mode::Cph => "cph",
        })
    }
}

/// Weights of the sparsity (`alpha1`), negativity (`alpha2`) and mask
/// logit L2 (`alpha3`) penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl PenaltyWeights {
    pub const DEFAULT_ALPHA1: f64 = 0.00005;
    pub const DEFAULT_ALPHA2: f64 = 0.01;
    pub const DEFAULT_ALPHA3: f64 = 0.00001;

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            alpha1: Self::DEFAULT_ALPHA1,
            alpha2: Self::DEFAULT_ALPHA2,
            alpha3: Self::DEFAULT_ALPHA3,
        }
    }
}

/// Mask used at evaluation time for annotators the model has no row for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenAnnotator {
    /// σ(0) = 0.5 on every dimension.
    Neutral,
    /// Mean of σ(φ_a) over known annotators.
    #[default]
    PopulationMean,
    Reject,
}

/// Embedding table plus per-annotator mask logits.
///
/// `w` is stimuli × dims (raw values, may be negative). `phi` is
/// annotators × dims and has zero rows in mode `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mode: Mode,
    pub w: Array2<f64>,
    pub phi: Array2<f64>,
    pub penalties: PenaltyWeights,
    pub unseen_annotator: UnseenAnnotator,
    stimulus_ids: Vec<String>,
    annotator_ids: Vec<String>,
    stimulus_index: HashMap<String, usize>,
    annotator_index: HashMap<String, usize>,
}

fn index_of(kind: &'static str, ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut m = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if m.insert(id.clone(), i).is_some() {
            return Err(Error::DuplicateId { kind, id: id.clone() });
        }
    }
    Ok(m)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ModelParams {
    pub fn new(
        mode: Mode,
        stimulus_ids: Vec<String>,
        annotator_ids: Vec<String>,
        w: Array2<f64>,
        phi: Array2<f64>,
        penalties: PenaltyWeights,
    ) -> Result<ModelParams> {
        if w.nrows() != stimulus_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "W has {} rows for {} stimuli",
                w.nrows(),
                stimulus_ids.len()
            )));
        }
        if phi.nrows() != annotator_ids.len() || phi.ncols() != w.ncols() {
            return Err(Error::InvalidArgument(format!(
                "Phi is {}x{}, expected {}x{}",
                phi.nrows(),
                phi.ncols(),
                annotator_ids.len(),
                w.ncols()
            )));
        }
        if mode == Mode::U && !annotator_ids.is_empty() {
            return Err(Error::Mode("unconditional models carry no annotator masks".into()));
        }
        Ok(ModelParams {
            mode,
            stimulus_index: index_of("stimulus", &stimulus_ids)?,
            annotator_index: index_of("annotator", &annotator_ids)?,
            stimulus_ids,
            annotator_ids,
            w,
            phi,
            penalties,
            unseen_annotator: UnseenAnnotator::default(),
        })
    }

    /// Mode-U model over raw embedding vectors.
    pub fn unconditional(stimulus_ids: Vec<String>, w: Array2<f64>) -> Result<ModelParams> {
        let d = w.ncols();
        Self::new(Mode::U, stimulus_ids, Vec::new(), w, Array2::zeros((0, d)), PenaltyWeights::default())
    }

    pub fn dims(&self) -> usize {
        self.w.ncols()
    }

    pub fn stimulus_ids(&self) -> &[String] {
        &self.stimulus_ids
    }

    pub fn annotator_ids(&self) -> &[String] {
        &self.annotator_ids
    }

    pub fn stimulus_row(&self, id: &str) -> Result<usize> {
        self.stimulus_index.get(id).copied().ok_or_else(|| Error::UnknownId {
            kind: "stimulus",
            id: id.to_string(),
        })
    }

    pub fn annotator_row(&self, id: &str) -> Option<usize> {
        self.annotator_index.get(id).copied()
    }

    pub fn embedding(&self, id: &str) -> Result<ArrayView1<'_, f64>> {
        Ok(self.w.row(self.stimulus_row(id)?))
    }

    /// Rectified embedding values.
    pub fn rectified(&self) -> Array2<f64> {
        self.w.mapv(|v| v.max(0.0))
    }

    /// σ(φ_a) for a known annotator row.
    pub fn mask_row(&self, row: usize) -> Vec<f64> {
        self.phi.row(row).iter().map(|&v| sigmoid(v)).collect()
    }

    /// Mean of σ(φ_a) over all annotators; all 0.5 when there are none.
    pub fn population_mask(&self) -> Vec<f64> {
        let d = self.dims();
        if self.phi.nrows() == 0 {
            return vec![0.5; d];
        }
        let mut acc = vec![0.0; d];
        for row in self.phi.rows() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += sigmoid(v);
            }
        }
        let n = self.phi.nrows() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Mask used when scoring: `None` in mode U (all ones). Conditional
    /// models fall back to the population mean when no annotator is given
    /// and to [`UnseenAnnotator`] for unknown ids.
    pub fn eval_mask(&self, annotator: Option<&str>) -> Result<Option<Vec<f64>>> {
        if !self.mode.is_conditional() {
            return Ok(None);
        }
        let Some(id) = annotator else {
            return Ok(Some(self.population_mask()));
        };
        match self.annotator_row(id) {
            Some(r) => Ok(Some(self.mask_row(r))),
            None => match self.unseen_annotator {
                UnseenAnnotator::Neutral => Ok(Some(vec![0.5; self.dims()])),
                UnseenAnnotator::PopulationMean => Ok(Some(self.population_mask())),
                UnseenAnnotator::Reject => Err(Error::UnknownId {
                    kind: "annotator",
                    id: id.to_string(),
                }),
            },
        }
    }

    /// Zeroes every column not listed in `keep`.
    pub fn with_dims_zeroed_except(&self, keep: &[usize]) -> ModelParams {
        let mut out = self.clone();
        for j in 0..self.dims() {
            if !keep.contains(&j) {
                out.w.column_mut(j).fill(0.0);
            }
        }
        out
    }

    /// Same embeddings as mode CPH with zero mask logits for `annotators`.
    pub fn into_post_hoc(&self, annotators: Vec<String>) -> Result<ModelParams> {
        let phi = Array2::zeros((annotators.len(), self.dims()));
        Self::new(Mode::Cph, self.stimulus_ids.clone(), annotators, self.w.clone(), phi, self.penalties)
    }
}
