//! Canonical data model, line-delimited ingestion, quality control and
//! train/validation splitting.
//!
//! Every file is UTF-8 with one JSON object per line. Blank lines are
//! skipped; line numbers in errors are 1-based.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub id: String,
    pub source_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotator {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender_identity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nationality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ancestry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subregional_ancestry: Option<String>,
}

/// Self-reported annotator fields usable as classification targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemographicField {
    AgeGroup,
    GenderIdentity,
    Nationality,
    Ancestry,
    SubregionalAncestry,
}

impl DemographicField {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "age_group" | "age" => Self::AgeGroup,
            "gender_identity" | "gender" => Self::GenderIdentity,
            "nationality" => Self::Nationality,
            "ancestry" => Self::Ancestry,
            "subregional_ancestry" => Self::SubregionalAncestry,
            other => {
                return Err(Error::InvalidArgument(format!("unknown demographic field {other:?}")))
            }
        })
    }
}

impl Annotator {
    pub fn field(&self, field: DemographicField) -> Option<&str> {
        match field {
            DemographicField::AgeGroup => self.age_group.as_deref(),
            DemographicField::GenderIdentity => self.gender_identity.as_deref(),
            DemographicField::Nationality => self.nationality.as_deref(),
            DemographicField::Ancestry => self.ancestry.as_deref(),
            DemographicField::SubregionalAncestry => self.subregional_ancestry.as_deref(),
        }
    }
}

/// One odd-one-out judgment. `odd_one_out` indexes into `triplet`.
///
/// `position_shown[slot]` is the triplet index displayed at screen slot
/// `slot`, when the display order was recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub triplet: [String; 3],
    pub odd_one_out: u8,
    pub annotator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_shown: Option<[u8; 3]>,
}

impl JudgmentRecord {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = &self.triplet;
        if a == b || a == c || b == c {
            return Err(Error::InvalidRecord(format!(
                "triplet ids must be distinct: {:?}",
                self.triplet
            )));
        }
        if self.odd_one_out > 2 {
            return Err(Error::InvalidRecord(format!(
                "odd_one_out must be 0, 1 or 2, got {}",
                self.odd_one_out
            )));
        }
        if let Some(p) = self.position_shown {
            let mut s = p;
            s.sort_unstable();
            if s != [0, 1, 2] {
                return Err(Error::InvalidRecord(format!(
                    "position_shown must be a permutation of 0..3, got {p:?}"
                )));
            }
        }
        Ok(())
    }

    /// Screen slot the chosen stimulus occupied; the triplet index itself
    /// when no display order was recorded.
    pub fn chosen_slot(&self) -> u8 {
        match self.position_shown {
            Some(p) => p
                .iter()
                .position(|&t| t == self.odd_one_out)
                .map(|s| s as u8)
                .unwrap_or(self.odd_one_out),
            None => self.odd_one_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRating {
    pub dimension: usize,
    pub probe_stimulus: String,
    pub column_percentile: u8,
    pub annotator_id: String,
}

impl GridRating {
    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.column_percentile) {
            return Err(Error::InvalidRecord(format!(
                "column_percentile must be in [1, 100], got {}",
                self.column_percentile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLabel {
    pub dimension: usize,
    pub text: Vec<String>,
    pub annotator_id: String,
}

impl GridLabel {
    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() || self.text.len() > 3 {
            return Err(Error::InvalidRecord(format!(
                "labels need 1-3 strings, got {}",
                self.text.len()
            )));
        }
        if self.text.iter().all(|t| t.trim().is_empty()) {
            return Err(Error::InvalidRecord("labels need at least one non-empty string".into()));
        }
        Ok(())
    }
}

/// A 3AFC submission without a choice. Only consulted by the incomplete
/// policy; it never enters the judgment list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmptySubmission {
    pub triplet: [String; 3],
    pub annotator_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub stimuli: Vec<Stimulus>,
    pub annotators: Vec<Annotator>,
    pub judgments: Vec<JudgmentRecord>,
    #[serde(default)]
    pub ratings: Vec<GridRating>,
    #[serde(default)]
    pub labels: Vec<GridLabel>,
    #[serde(default)]
    pub empty_submissions: Vec<EmptySubmission>,
}

/// Raw judgment line; `odd_one_out: null` marks an empty submission.
#[derive(Deserialize)]
struct JudgmentLine {
    triplet: [String; 3],
    odd_one_out: Option<u8>,
    annotator_id: String,
    #[serde(default)]
    response_ms: Option<u64>,
    #[serde(default)]
    position_shown: Option<[u8; 3]>,
}

#[derive(Serialize)]
struct EmptyLine<'a> {
    triplet: &'a [String; 3],
    odd_one_out: Option<u8>,
    annotator_id: &'a str,
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads a line-delimited JSON file, returning each record with its 1-based
/// line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let label = file_label(path);
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: label.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, rec));
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidRecord(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl Corpus {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.stimuli.len(), self.annotators.len(), self.judgments.len())
    }

    pub fn stimulus_ids(&self) -> Vec<String> {
        self.stimuli.iter().map(|s| s.id.clone()).collect()
    }

    pub fn annotator(&self, id: &str) -> Option<&Annotator> {
        self.annotators.iter().find(|a| a.id == id)
    }

    /// Judgment counts per annotator id.
    pub fn judgments_per_annotator(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for j in &self.judgments {
            *m.entry(j.annotator_id.as_str()).or_insert(0) += 1;
        }
        m
    }

    /// Same stimuli and annotators, different judgment list.
    pub fn with_judgments(&self, judgments: Vec<JudgmentRecord>) -> Corpus {
        Corpus {
            stimuli: self.stimuli.clone(),
            annotators: self.annotators.clone(),
            judgments,
            ratings: self.ratings.clone(),
            labels: self.labels.clone(),
            empty_submissions: Vec::new(),
        }
    }

    /// Checks id uniqueness and that every reference resolves.
    pub fn validate(&self) -> Result<()> {
        let stim = unique_ids("stimulus", self.stimuli.iter().map(|s| s.id.as_str()))?;
        let ann = unique_ids("annotator", self.annotators.iter().map(|a| a.id.as_str()))?;
        for j in &self.judgments {
            j.validate()?;
            resolve_judgment(&stim, &ann, &j.triplet, &j.annotator_id, "judgments", 0)?;
        }
        for r in &self.ratings {
            r.validate()?;
            if !ann.contains(r.annotator_id.as_str()) {
                return Err(Error::UnknownId {
                    kind: "annotator",
                    id: r.annotator_id.clone(),
                });
            }
        }
        for l in &self.labels {
            l.validate()?;
        }
        Ok(())
    }

    /// Writes the canonical files into `dir`. Empty submissions follow the
    /// judgments in `judgments.jsonl` with `odd_one_out: null`; empty rating
    /// and label lists produce no file.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("stimuli.jsonl"), &self.stimuli)?;
        write_jsonl(&dir.join("annotators.jsonl"), &self.annotators)?;
        let empties: Vec<EmptyLine<'_>> = self
            .empty_submissions
            .iter()
            .map(|e| EmptyLine { triplet: &e.triplet, odd_one_out: None, annotator_id: &e.annotator_id })
            .collect();
        let mut lines: Vec<serde_json::Value> = Vec::with_capacity(self.judgments.len() + empties.len());
        for j in &self.judgments {
            lines.push(serde_json::to_value(j).map_err(|e| Error::InvalidRecord(e.to_string()))?);
        }
        for e in &empties {
            lines.push(serde_json::to_value(e).map_err(|e| Error::InvalidRecord(e.to_string()))?);
        }
        write_jsonl(&dir.join("judgments.jsonl"), &lines)?;
        if !self.ratings.is_empty() {
            write_jsonl(&dir.join("ratings.jsonl"), &self.ratings)?;
        }
        if !self.labels.is_empty() {
            write_jsonl(&dir.join("labels.jsonl"), &self.labels)?;
        }
        Ok(())
    }

    /// Loads a directory written by [`Corpus::save_dir`]. `ratings.jsonl` and
    /// `labels.jsonl` are optional.
    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        let mut c = load_corpus(
            &dir.join("stimuli.jsonl"),
            &dir.join("annotators.jsonl"),
            &dir.join("judgments.jsonl"),
        )?;
        let ratings = dir.join("ratings.jsonl");
        if ratings.exists() {
            c.load_ratings(&ratings)?;
        }
        let labels = dir.join("labels.jsonl");
        if labels.exists() {
            c.load_labels(&labels)?;
        }
        Ok(c)
    }

    pub fn load_ratings(&mut self, path: &Path) -> Result<()> {
        let label = file_label(path);
        let ann: HashSet<&str> = self.annotators.iter().map(|a| a.id.as_str()).collect();
        let mut out = Vec::new();
        for (line, r) in read_jsonl::<GridRating>(path)? {
            r.validate().map_err(|e| Error::Parse {
                file: label.clone(),
                line,
                message: e.to_string(),
            })?;
            if !ann.contains(r.annotator_id.as_str()) {
                return Err(Error::UnresolvedId {
                    file: label.clone(),
                    line,
                    kind: "annotator",
                    id: r.annotator_id.clone(),
                });
            }
            out.push(r);
        }
        self.ratings = out;
        Ok(())
    }

    pub fn load_labels(&mut self, path: &Path) -> Result<()> {
        let label = file_label(path);
        let mut out = Vec::new();
        for (line, l) in read_jsonl::<GridLabel>(path)? {
            l.validate().map_err(|e| Error::Parse {
                file: label.clone(),
                line,
                message: e.to_string(),
            })?;
            out.push(l);
        }
        self.labels = out;
        Ok(())
    }
}

fn unique_ids<'a>(
    kind: &'static str,
    ids: impl Iterator<Item = &'a str>,
) -> Result<HashSet<&'a str>> {
    let mut set = HashSet::new();
    for id in ids {
        if !set.insert(id) {
            return Err(Error::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(set)
}

fn resolve_judgment(
    stim: &HashSet<&str>,
    ann: &HashSet<&str>,
    triplet: &[String; 3],
    annotator: &str,
    file: &str,
    line: usize,
) -> Result<()> {
    for id in triplet {
        if !stim.contains(id.as_str()) {
            return Err(Error::UnresolvedId {
                file: file.to_string(),
                line,
                kind: "stimulus",
                id: id.clone(),
            });
        }
    }
    if !ann.contains(annotator) {
        return Err(Error::UnresolvedId {
            file: file.to_string(),
            line,
            kind: "annotator",
            id: annotator.to_string(),
        });
    }
    Ok(())
}

/// Loads and cross-validates the three core files.
pub fn load_corpus(stimuli_path: &Path, annotators_path: &Path, judgments_path: &Path) -> Result<Corpus> {
    let stimuli: Vec<Stimulus> = read_jsonl(stimuli_path)?.into_iter().map(|(_, s)| s).collect();
    let annotators: Vec<Annotator> = read_jsonl(annotators_path)?
        .into_iter()
        .map(|(_, a)| a)
        .collect();
    let stim = unique_ids("stimulus", stimuli.iter().map(|s| s.id.as_str()))?;
    let ann = unique_ids("annotator", annotators.iter().map(|a| a.id.as_str()))?;

    let label = file_label(judgments_path);
    let mut judgments = Vec::new();
    let mut empty_submissions = Vec::new();
    for (line, raw) in read_jsonl::<JudgmentLine>(judgments_path)? {
        resolve_judgment(&stim, &ann, &raw.triplet, &raw.annotator_id, &label, line)?;
        match raw.odd_one_out {
            Some(choice) => {
                let rec = JudgmentRecord {
                    triplet: raw.triplet,
                    odd_one_out: choice,
                    annotator_id: raw.annotator_id,
                    response_ms: raw.response_ms,
                    position_shown: raw.position_shown,
                };
                rec.validate().map_err(|e| Error::Parse {
                    file: label.clone(),
                    line,
                    message: e.to_string(),
                })?;
                judgments.push(rec);
            }
            None => empty_submissions.push(EmptySubmission {
                triplet: raw.triplet,
                annotator_id: raw.annotator_id,
            }),
        }
    }
    Ok(Corpus {
        stimuli,
        annotators,
        judgments,
        ratings: Vec::new(),
        labels: Vec::new(),
        empty_submissions,
    })
}

// ---------------------------------------------------------------------------
// Quality control
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QcCriterion {
    /// More than `max_fraction` of judgments faster than `threshold_ms`.
    FastFraction { threshold_ms: u64, max_fraction: f64 },
    /// More than `max_fraction` of judgments on a single screen slot.
    DeterministicPosition { max_fraction: f64 },
    /// At least `min_judgments` empty submissions.
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcPolicy {
    pub name: String,
    pub criterion: QcCriterion,
    pub min_judgments: usize,
}

impl QcPolicy {
    pub fn fast(name: &str, threshold_ms: u64, max_fraction: f64, min_judgments: usize) -> Self {
        QcPolicy {
            name: name.into(),
            criterion: QcCriterion::FastFraction {
                threshold_ms,
                max_fraction,
            },
            min_judgments,
        }
    }

    pub fn deterministic(name: &str, max_fraction: f64, min_judgments: usize) -> Self {
        QcPolicy {
            name: name.into(),
            criterion: QcCriterion::DeterministicPosition { max_fraction },
            min_judgments,
        }
    }

    pub fn incomplete(name: &str, min_judgments: usize) -> Self {
        QcPolicy {
            name: name.into(),
            criterion: QcCriterion::Incomplete,
            min_judgments,
        }
    }

    /// Fast#1 (0.8 s, 25%, min 100), Fast#2 (1.1 s, 50%, min 100),
    /// Deterministic (40%, min 200), Incomplete (min 1).
    pub fn defaults() -> Vec<QcPolicy> {
        vec![
            QcPolicy::fast("fast_1", 800, 0.25, 100),
            QcPolicy::fast("fast_2", 1100, 0.50, 100),
            QcPolicy::deterministic("deterministic", 0.40, 200),
            QcPolicy::incomplete("incomplete", 1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_judgments == 0 {
            return Err(Error::InvalidArgument(format!(
                "policy {}: min_judgments must be positive",
                self.name
            )));
        }
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        match self.criterion {
            QcCriterion::FastFraction {
                threshold_ms,
                max_fraction,
            } => {
                if threshold_ms == 0 || !frac_ok(max_fraction) {
                    return Err(Error::InvalidArgument(format!(
                        "policy {}: threshold must be positive and fraction in (0, 1]",
                        self.name
                    )));
                }
            }
            QcCriterion::DeterministicPosition { max_fraction } => {
                if !frac_ok(max_fraction) {
                    return Err(Error::InvalidArgument(format!(
                        "policy {}: fraction must be in (0, 1]",
                        self.name
                    )));
                }
            }
            QcCriterion::Incomplete => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyExclusions {
    pub policy: String,
    pub annotators: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub per_policy: Vec<PolicyExclusions>,
    /// Union over policies, sorted.
    pub excluded_annotators: Vec<String>,
    pub removed_judgments: usize,
    pub retained_judgments: usize,
    /// Annotators a fast policy could not assess because none of their
    /// judgments carry a response time.
    pub unassessed_no_timing: Vec<String>,
}

/// Drops every record (judgments, empty submissions, ratings, labels) of
/// any annotator that violates any policy.
///
/// Annotators whose judgments all lack `response_ms` are skipped by fast
/// policies and listed in the report; a partial mix of timed and untimed
/// judgments for one annotator is an error naming the untimed records.
pub fn apply_quality_control(corpus: &Corpus, policies: &[QcPolicy]) -> Result<(Corpus, ExclusionReport)> {
    for p in policies {
        p.validate()?;
    }
    let mut by_annotator: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, j) in corpus.judgments.iter().enumerate() {
        by_annotator.entry(j.annotator_id.as_str()).or_default().push(i);
    }
    let mut empty_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &corpus.empty_submissions {
        *empty_counts.entry(e.annotator_id.as_str()).or_insert(0) += 1;
    }

    let mut report = ExclusionReport::default();
    let mut excluded: BTreeSet<String> = BTreeSet::new();
    let mut unassessed: BTreeSet<String> = BTreeSet::new();

    for policy in policies {
        let mut hit = Vec::new();
        match policy.criterion {
            QcCriterion::FastFraction {
                threshold_ms,
                max_fraction,
            } => {
                for (&ann, idxs) in &by_annotator {
                    let missing: Vec<usize> = idxs
                        .iter()
                        .copied()
                        .filter(|&i| corpus.judgments[i].response_ms.is_none())
                        .collect();
                    if missing.len() == idxs.len() {
                        unassessed.insert(ann.to_string());
                        continue;
                    }
                    if !missing.is_empty() {
                        return Err(Error::MissingResponseTime {
                            policy: policy.name.clone(),
                            records: missing,
                        });
                    }
                    if idxs.len() < policy.min_judgments {
                        continue;
                    }
                    let fast = idxs
                        .iter()
                        .filter(|&&i| corpus.judgments[i].response_ms.unwrap() < threshold_ms)
                        .count();
                    if fast as f64 / idxs.len() as f64 > max_fraction {
                        hit.push(ann.to_string());
                    }
                }
            }
            QcCriterion::DeterministicPosition { max_fraction } => {
                for (&ann, idxs) in &by_annotator {
                    if idxs.len() < policy.min_judgments {
                        continue;
                    }
                    let mut slots = [0usize; 3];
                    for &i in idxs {
                        slots[corpus.judgments[i].chosen_slot() as usize] += 1;
                    }
                    let top = *slots.iter().max().unwrap();
                    if top as f64 / idxs.len() as f64 > max_fraction {
                        hit.push(ann.to_string());
                    }
                }
            }
            QcCriterion::Incomplete => {
                for (&ann, &n) in &empty_counts {
                    if n >= policy.min_judgments {
                        hit.push(ann.to_string());
                    }
                }
            }
        }
        excluded.extend(hit.iter().cloned());
        report.per_policy.push(PolicyExclusions {
            policy: policy.name.clone(),
            annotators: hit,
        });
    }

    let judgments: Vec<JudgmentRecord> = corpus
        .judgments
        .iter()
        .filter(|j| !excluded.contains(&j.annotator_id))
        .cloned()
        .collect();
    report.removed_judgments = corpus.judgments.len() - judgments.len();
    report.retained_judgments = judgments.len();
    report.excluded_annotators = excluded.iter().cloned().collect();
    report.unassessed_no_timing = unassessed.into_iter().collect();

    let mut out = corpus.with_judgments(judgments);
    out.empty_submissions = corpus
        .empty_submissions
        .iter()
        .filter(|e| !excluded.contains(&e.annotator_id))
        .cloned()
        .collect();
    out.ratings.retain(|r| !excluded.contains(&r.annotator_id));
    out.labels.retain(|l| !excluded.contains(&l.annotator_id));
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Uniform over judgments.
    #[default]
    PerJudgment,
    /// Each annotator contributes round(fraction * count) judgments to validation.
    ByAnnotator,
}

/// Partitions judgments into (train, validation). Both sides keep the input
/// order of their judgments.
pub fn split(corpus: &Corpus, validation_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    split_with(corpus, validation_fraction, seed, SplitStrategy::PerJudgment)
}

pub fn split_with(
    corpus: &Corpus,
    validation_fraction: f64,
    seed: u64,
    strategy: SplitStrategy,
) -> Result<(Corpus, Corpus)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must be in (0, 1), got {validation_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = corpus.judgments.len();
    let mut is_val = vec![false; n];
    match strategy {
        SplitStrategy::PerJudgment => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let n_val = (validation_fraction * n as f64).round() as usize;
            for &i in &idx[..n_val] {
                is_val[i] = true;
            }
        }
        SplitStrategy::ByAnnotator => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, j) in corpus.judgments.iter().enumerate() {
                groups.entry(j.annotator_id.as_str()).or_default().push(i);
            }
            for idx in groups.values_mut() {
                idx.shuffle(&mut rng);
                let n_val = (validation_fraction * idx.len() as f64).round() as usize;
                for &i in &idx[..n_val] {
                    is_val[i] = true;
                }
            }
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (j, v) in corpus.judgments.iter().zip(is_val) {
        if v {
            val.push(j.clone());
        } else {
            train.push(j.clone());
        }
    }
    Ok((corpus.with_judgments(train), corpus.with_judgments(val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn judgment(ids: [&str; 3], ooo: u8, ann: &str, ms: Option<u64>) -> JudgmentRecord {
        JudgmentRecord {
            triplet: ids.map(String::from),
            odd_one_out: ooo,
            annotator_id: ann.into(),
            response_ms: ms,
            position_shown: None,
        }
    }

    fn tiny_corpus(judgments: Vec<JudgmentRecord>, annotators: &[&str]) -> Corpus {
        Corpus {
            stimuli: ["a", "b", "c", "d"]
                .iter()
                .map(|s| Stimulus {
                    id: s.to_string(),
                    source_ref: format!("{s}.png"),
                    attributes: None,
                })
                .collect(),
            annotators: annotators
                .iter()
                .map(|a| Annotator {
                    id: a.to_string(),
                    ..Default::default()
                })
                .collect(),
            judgments,
            ..Default::default()
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_corpus_loads() {
        let d = tempfile::tempdir().unwrap();
        let s = write(
            d.path(),
            "stimuli.jsonl",
            "{\"id\":\"a\",\"source_ref\":\"a.png\"}\n{\"id\":\"b\",\"source_ref\":\"b.png\"}\n{\"id\":\"c\",\"source_ref\":\"c.png\",\"attributes\":{\"k\":\"v\"}}\n",
        );
        let a = write(d.path(), "annotators.jsonl", "{\"id\":\"x\",\"nationality\":\"nz\"}\n");
        let j = write(
            d.path(),
            "judgments.jsonl",
            "{\"triplet\":[\"a\",\"b\",\"c\"],\"odd_one_out\":1,\"annotator_id\":\"x\",\"response_ms\":1500}\n",
        );
        let c = load_corpus(&s, &a, &j).unwrap();
        assert_eq!(c.counts(), (3, 1, 1));
    }

    #[test]
    fn unknown_stimulus_is_named_with_line() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "stimuli.jsonl", "{\"id\":\"a\",\"source_ref\":\"\"}\n{\"id\":\"b\",\"source_ref\":\"\"}\n{\"id\":\"c\",\"source_ref\":\"\"}\n");
        let a = write(d.path(), "annotators.jsonl", "{\"id\":\"x\"}\n");
        let j = write(
            d.path(),
            "judgments.jsonl",
            "{\"triplet\":[\"a\",\"b\",\"c\"],\"odd_one_out\":0,\"annotator_id\":\"x\"}\n{\"triplet\":[\"a\",\"b\",\"s999\"],\"odd_one_out\":0,\"annotator_id\":\"x\"}\n",
        );
        let err = load_corpus(&s, &a, &j).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s999"), "{msg}");
        assert!(matches!(err, Error::UnresolvedId { line: 2, .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "stimuli.jsonl", "{\"id\":\"a\",\"source_ref\":\"\"}\n{\"id\":\"a\",\"source_ref\":\"\"}\n");
        let a = write(d.path(), "annotators.jsonl", "{\"id\":\"x\"}\n");
        let j = write(d.path(), "judgments.jsonl", "");
        assert!(matches!(load_corpus(&s, &a, &j), Err(Error::DuplicateId { .. })));
    }

    #[test]
    fn null_choice_becomes_empty_submission() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "stimuli.jsonl", "{\"id\":\"a\",\"source_ref\":\"\"}\n{\"id\":\"b\",\"source_ref\":\"\"}\n{\"id\":\"c\",\"source_ref\":\"\"}\n");
        let a = write(d.path(), "annotators.jsonl", "{\"id\":\"x\"}\n{\"id\":\"y\"}\n");
        let j = write(
            d.path(),
            "judgments.jsonl",
            "{\"triplet\":[\"a\",\"b\",\"c\"],\"odd_one_out\":null,\"annotator_id\":\"x\"}\n{\"triplet\":[\"a\",\"b\",\"c\"],\"odd_one_out\":2,\"annotator_id\":\"x\"}\n{\"triplet\":[\"a\",\"b\",\"c\"],\"odd_one_out\":2,\"annotator_id\":\"y\"}\n",
        );
        let c = load_corpus(&s, &a, &j).unwrap();
        assert_eq!(c.judgments.len(), 2);
        assert_eq!(c.empty_submissions.len(), 1);
        let (kept, report) = apply_quality_control(&c, &[QcPolicy::incomplete("incomplete", 1)]).unwrap();
        assert_eq!(report.excluded_annotators, vec!["x".to_string()]);
        assert_eq!(kept.judgments.len(), 1);
    }

    #[test]
    fn choice_out_of_range_rejected() {
        assert!(judgment(["a", "b", "c"], 3, "x", None).validate().is_err());
        assert!(judgment(["a", "a", "c"], 0, "x", None).validate().is_err());
    }

    fn fast_annotator(total: usize, fast: usize, ann: &str) -> Vec<JudgmentRecord> {
        (0..total)
            .map(|i| judgment(["a", "b", "c"], (i % 3) as u8, ann, Some(if i < fast { 500 } else { 2000 })))
            .collect()
    }

    #[test]
    fn fast_policy_excludes_over_threshold() {
        let mut js = fast_annotator(100, 30, "spam");
        js.extend(fast_annotator(100, 10, "ok"));
        let c = tiny_corpus(js, &["spam", "ok"]);
        let (kept, report) = apply_quality_control(&c, &[QcPolicy::fast("fast_1", 800, 0.25, 100)]).unwrap();
        assert_eq!(report.excluded_annotators, vec!["spam".to_string()]);
        assert_eq!(kept.judgments.len(), 100);
        assert!(kept.judgments.iter().all(|j| j.annotator_id == "ok"));
    }

    #[test]
    fn fast_policy_respects_min_judgments() {
        let c = tiny_corpus(fast_annotator(99, 99, "spam"), &["spam"]);
        let (kept, report) = apply_quality_control(&c, &[QcPolicy::fast("fast_1", 800, 0.25, 100)]).unwrap();
        assert!(report.excluded_annotators.is_empty());
        assert_eq!(kept.judgments.len(), 99);
    }

    #[test]
    fn deterministic_position_policy() {
        let js: Vec<_> = (0..200)
            .map(|i| judgment(["a", "b", "c"], if i < 90 { 0 } else { 1 + (i % 2) as u8 }, "det", None))
            .collect();
        let c = tiny_corpus(js, &["det"]);
        let (_, report) = apply_quality_control(&c, &[QcPolicy::deterministic("deterministic", 0.40, 200)]).unwrap();
        assert_eq!(report.excluded_annotators, vec!["det".to_string()]);
    }

    #[test]
    fn deterministic_uses_screen_slot() {
        // always clicks the left slot, but the shown order rotates
        let js: Vec<_> = (0..200)
            .map(|i| {
                let perm = [[0, 1, 2], [1, 2, 0], [2, 0, 1]][i % 3];
                let mut j = judgment(["a", "b", "c"], perm[0], "left", None);
                j.position_shown = Some(perm);
                j
            })
            .collect();
        let c = tiny_corpus(js, &["left"]);
        let (_, report) = apply_quality_control(&c, &[QcPolicy::deterministic("deterministic", 0.40, 200)]).unwrap();
        assert_eq!(report.excluded_annotators, vec!["left".to_string()]);
    }

    #[test]
    fn missing_times_flagged_or_rejected() {
        let c = tiny_corpus(fast_annotator(100, 0, "old").into_iter().map(|mut j| { j.response_ms = None; j }).collect(), &["old"]);
        let (kept, report) = apply_quality_control(&c, &QcPolicy::defaults()).unwrap();
        assert_eq!(report.unassessed_no_timing, vec!["old".to_string()]);
        assert_eq!(kept.judgments.len(), 100);

        let mut js = fast_annotator(100, 0, "mixed");
        js[7].response_ms = None;
        let c = tiny_corpus(js, &["mixed"]);
        match apply_quality_control(&c, &QcPolicy::defaults()) {
            Err(Error::MissingResponseTime { records, .. }) => assert_eq!(records, vec![7]),
            other => panic!("expected missing response time error, got {other:?}"),
        }
    }

    #[test]
    fn split_exact_and_deterministic() {
        let js: Vec<_> = (0..10).map(|i| judgment(["a", "b", "c"], (i % 3) as u8, "x", None)).collect();
        let c = tiny_corpus(js, &["x"]);
        let (t, v) = split(&c, 0.1, 7).unwrap();
        assert_eq!((t.judgments.len(), v.judgments.len()), (9, 1));
        let (t2, v2) = split(&c, 0.1, 7).unwrap();
        assert_eq!(t, t2);
        assert_eq!(v, v2);
        assert!(split(&c, 0.0, 7).is_err());
        assert!(split(&c, 1.0, 7).is_err());
    }

    #[test]
    fn save_then_load_round_trips() {
        let mut js = fast_annotator(5, 2, "x");
        js[1].position_shown = Some([2, 0, 1]);
        let mut c = tiny_corpus(js, &["x"]);
        c.stimuli[0].attributes = Some(BTreeMap::from([("age".into(), "30".into())]));
        c.ratings.push(GridRating {
            dimension: 3,
            probe_stimulus: "p1".into(),
            column_percentile: 40,
            annotator_id: "x".into(),
        });
        c.labels.push(GridLabel {
            dimension: 3,
            text: vec!["smiling".into()],
            annotator_id: "x".into(),
        });
        let t = c.judgments[0].triplet.clone();
        c.empty_submissions.push(EmptySubmission { triplet: t, annotator_id: "x".into() });
        let d = tempfile::tempdir().unwrap();
        c.save_dir(d.path()).unwrap();
        assert_eq!(Corpus::load_dir(d.path()).unwrap(), c);
    }

    fn arb_judgments() -> impl Strategy<Value = Vec<JudgmentRecord>> {
        proptest::collection::vec((0u8..3, 0usize..4, 200u64..3000, 0usize..3), 0..400).prop_map(|v| {
            v.into_iter()
                .map(|(ooo, ann, ms, slot)| {
                    let mut j = judgment(["a", "b", "c"], ooo, ["p", "q", "r", "s"][ann], Some(ms));
                    j.position_shown = Some([[0, 1, 2], [2, 1, 0], [1, 0, 2]][slot]);
                    j
                })
                .collect()
        })
    }

    fn loose_policies() -> Vec<QcPolicy> {
        vec![
            QcPolicy::fast("fast_1", 800, 0.25, 20),
            QcPolicy::fast("fast_2", 1100, 0.50, 20),
            QcPolicy::deterministic("deterministic", 0.40, 30),
        ]
    }

    proptest! {
        #[test]
        fn qc_idempotent_and_monotone(js in arb_judgments(), k in 0usize..4) {
            let c = tiny_corpus(js, &["p", "q", "r", "s"]);
            let policies = loose_policies();
            let (once, _) = apply_quality_control(&c, &policies).unwrap();
            let (twice, _) = apply_quality_control(&once, &policies).unwrap();
            prop_assert_eq!(&once, &twice);
            let (fewer, _) = apply_quality_control(&c, &policies[..k.min(policies.len())]).unwrap();
            prop_assert!(once.judgments.len() <= fewer.judgments.len());
        }

        #[test]
        fn split_is_partition(js in arb_judgments(), frac in 0.05f64..0.95, seed in 0u64..1000) {
            let c = tiny_corpus(js, &["p", "q", "r", "s"]);
            for strategy in [SplitStrategy::PerJudgment, SplitStrategy::ByAnnotator] {
                let (t, v) = split_with(&c, frac, seed, strategy).unwrap();
                prop_assert_eq!(t.judgments.len() + v.judgments.len(), c.judgments.len());
                // union equals input as a multiset
                let mut all: Vec<String> = t.judgments.iter().chain(&v.judgments).map(|j| serde_json::to_string(j).unwrap()).collect();
                let mut orig: Vec<String> = c.judgments.iter().map(|j| serde_json::to_string(j).unwrap()).collect();
                all.sort();
                orig.sort();
                prop_assert_eq!(all, orig);
            }
        }
    }
}
