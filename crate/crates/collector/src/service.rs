//! Campaign state, task assignment and submission handling.
//!
//! All mutations go through one mutex: an event is appended to the log, then
//! folded into memory, so assignment bookkeeping is atomic per request and
//! the log has a single writer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use oddity_core::corpus::{
    apply_quality_control, Annotator, Corpus, EmptySubmission, ExclusionReport, GridLabel, GridRating, JudgmentRecord,
    QcPolicy, Stimulus,
};
use oddity_core::insight::GridSpec;
use oddity_core::sampler::TripletKey;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CollectorError, Result};
use crate::store::{read_snapshot, write_snapshot, EventLog, Snapshot};

#[derive(Debug, Clone)]
pub struct CollectorConfig {
    pub data_dir: PathBuf,
    pub stimuli: Vec<Stimulus>,
    /// 3AFC pool, served least-served first.
    pub triplets: Vec<TripletKey>,
    pub judgments_per_triplet: usize,
    pub grids: Vec<GridSpec>,
    /// Probe stimuli for the grid-rating task.
    pub probes: Vec<String>,
    /// Target ratings per (grid, probe) pair.
    pub ratings_per_probe: usize,
    pub labels_per_grid: usize,
    pub image_dir: Option<PathBuf>,
    pub admin_token: String,
    /// Snapshot after this many events; 0 disables snapshots.
    pub snapshot_every: u64,
    pub qc_policies: Vec<QcPolicy>,
    /// Seed for display permutations; OS entropy when `None`.
    pub seed: Option<u64>,
}

impl CollectorConfig {
    pub fn new(data_dir: impl Into<PathBuf>, stimuli: Vec<Stimulus>, triplets: Vec<TripletKey>, admin_token: &str) -> Self {
        CollectorConfig {
            data_dir: data_dir.into(),
            stimuli,
            triplets,
            judgments_per_triplet: 1,
            grids: Vec::new(),
            probes: Vec::new(),
            ratings_per_probe: 1,
            labels_per_grid: 1,
            image_dir: None,
            admin_token: admin_token.to_string(),
            snapshot_every: 1000,
            qc_policies: QcPolicy::defaults(),
            seed: None,
        }
    }

    /// Hash of everything that gives log indices their meaning; a data
    /// directory is bound to one campaign.
    fn fingerprint(&self) -> String {
        let ids: Vec<&str> = self.stimuli.iter().map(|s| s.id.as_str()).collect();
        let triplets: Vec<&[String; 3]> = self.triplets.iter().map(TripletKey::ids).collect();
        let dims: Vec<usize> = self.grids.iter().map(|g| g.dimension).collect();
        let v = serde_json::json!({
            "stimuli": ids,
            "triplets": triplets,
            "judgments_per_triplet": self.judgments_per_triplet,
            "grids": dims,
            "probes": self.probes,
            "ratings_per_probe": self.ratings_per_probe,
            "labels_per_grid": self.labels_per_grid,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        if self.admin_token.len() < 8 {
            return Err(CollectorError::Invalid("admin token must be at least 8 characters".into()));
        }
        if self.judgments_per_triplet == 0 || self.ratings_per_probe == 0 || self.labels_per_grid == 0 {
            return Err(CollectorError::Invalid("assignment targets must be >= 1".into()));
        }
        let ids: HashSet<&str> = self.stimuli.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != self.stimuli.len() {
            return Err(CollectorError::Invalid("duplicate stimulus ids".into()));
        }
        for t in &self.triplets {
            if let Some(id) = t.ids().iter().find(|id| !ids.contains(id.as_str())) {
                return Err(CollectorError::Invalid(format!("triplet references unknown stimulus {id}")));
            }
        }
        if let Some(p) = self.probes.iter().find(|p| !ids.contains(p.as_str())) {
            return Err(CollectorError::Invalid(format!("unknown probe stimulus {p}")));
        }
        let mut dims = HashSet::new();
        if self.grids.iter().any(|g| !dims.insert(g.dimension)) {
            return Err(CollectorError::Invalid("duplicate grid dimensions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ThreeAfc,
    GridRating,
    GridLabel,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "three_afc" | "3afc" => Ok(TaskKind::ThreeAfc),
            "grid_rating" => Ok(TaskKind::GridRating),
            "grid_label" => Ok(TaskKind::GridLabel),
            other => Err(CollectorError::Invalid(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskPayload {
    ThreeAfc {
        triplet_index: usize,
        /// Stored (key) order.
        triplet: [String; 3],
        /// `position_shown[slot]` is the triplet index shown at `slot`.
        position_shown: [u8; 3],
        /// Stimulus ids in display order.
        display: [String; 3],
    },
    GridRating {
        pair_index: usize,
        dimension: usize,
        probe_stimulus: String,
    },
    GridLabel {
        grid_index: usize,
        dimension: usize,
    },
}

impl TaskPayload {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskPayload::ThreeAfc { .. } => TaskKind::ThreeAfc,
            TaskPayload::GridRating { .. } => TaskKind::GridRating,
            TaskPayload::GridLabel { .. } => TaskKind::GridLabel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub annotator_id: String,
    #[serde(flatten)]
    pub payload: TaskPayload,
    pub issued_at_ms: u64,
    #[serde(default)]
    pub answered: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    CampaignOpened {
        fingerprint: String,
    },
    AnnotatorRegistered {
        annotator: Annotator,
        token_sha256: String,
        at_ms: u64,
    },
    TaskIssued {
        task: Task,
    },
    /// `slot` is the screen slot picked; `None` is an empty submission.
    JudgmentSubmitted {
        task_id: String,
        slot: Option<u8>,
        response_ms: Option<u64>,
        server_elapsed_ms: u64,
    },
    RatingSubmitted {
        task_id: String,
        column_percentile: u8,
    },
    LabelsSubmitted {
        task_id: String,
        text: Vec<String>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotatorEntry {
    annotator: Annotator,
    token_sha256: String,
    created_at_ms: u64,
    tasks_served: u64,
    tasks_completed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct State {
    fingerprint: Option<String>,
    /// Registration order.
    annotators: Vec<AnnotatorEntry>,
    tasks: BTreeMap<u64, Task>,
    next_task: u64,
    triplet_served: Vec<u32>,
    triplet_answered: Vec<u32>,
    rating_served: Vec<u32>,
    label_served: Vec<u32>,
    judgments: Vec<JudgmentRecord>,
    empty_submissions: Vec<EmptySubmission>,
    ratings: Vec<GridRating>,
    labels: Vec<GridLabel>,
    #[serde(skip)]
    index: Indexes,
}

#[derive(Debug, Clone, Default)]
struct Indexes {
    by_token: HashMap<String, usize>,
    by_id: HashMap<String, usize>,
    seen: HashSet<(usize, TaskKind, usize)>,
}

fn task_seq(task_id: &str) -> Option<u64> {
    task_id.strip_prefix('t').and_then(|s| s.parse().ok())
}

impl State {
    fn sized(config: &CollectorConfig) -> State {
        State {
            triplet_served: vec![0; config.triplets.len()],
            triplet_answered: vec![0; config.triplets.len()],
            rating_served: vec![0; config.grids.len() * config.probes.len()],
            label_served: vec![0; config.grids.len()],
            ..Default::default()
        }
    }

    fn rebuild_index(&mut self) {
        let mut ix = Indexes::default();
        for (i, a) in self.annotators.iter().enumerate() {
            ix.by_token.insert(a.token_sha256.clone(), i);
            ix.by_id.insert(a.annotator.id.clone(), i);
        }
        for t in self.tasks.values() {
            let a = ix.by_id[&t.annotator_id];
            ix.seen.insert(seen_key(a, &t.payload));
        }
        self.index = ix;
    }

    fn task(&self, task_id: &str) -> Result<&Task> {
        task_seq(task_id)
            .and_then(|s| self.tasks.get(&s))
            .ok_or_else(|| CollectorError::NotFound(format!("unknown task {task_id}")))
    }

    fn apply(&mut self, event: Event) -> Result<()> {
        match event {
            Event::CampaignOpened { fingerprint } => self.fingerprint = Some(fingerprint),
            Event::AnnotatorRegistered { annotator, token_sha256, at_ms } => {
                let i = self.annotators.len();
                self.index.by_token.insert(token_sha256.clone(), i);
                self.index.by_id.insert(annotator.id.clone(), i);
                self.annotators.push(AnnotatorEntry {
                    annotator,
                    token_sha256,
                    created_at_ms: at_ms,
                    tasks_served: 0,
                    tasks_completed: 0,
                });
            }
            Event::TaskIssued { task } => {
                let seq = task_seq(&task.task_id).ok_or_else(|| CollectorError::Storage("bad task id".into()))?;
                let a = *self
                    .index
                    .by_id
                    .get(&task.annotator_id)
                    .ok_or_else(|| CollectorError::Storage("task for unknown annotator".into()))?;
                self.annotators[a].tasks_served += 1;
                self.index.seen.insert(seen_key(a, &task.payload));
                match &task.payload {
                    TaskPayload::ThreeAfc { triplet_index, .. } => self.triplet_served[*triplet_index] += 1,
                    TaskPayload::GridRating { pair_index, .. } => self.rating_served[*pair_index] += 1,
                    TaskPayload::GridLabel { grid_index, .. } => self.label_served[*grid_index] += 1,
                }
                self.next_task = self.next_task.max(seq + 1);
                self.tasks.insert(seq, task);
            }
            Event::JudgmentSubmitted { task_id, slot, response_ms, .. } => {
                let task = self.answer(&task_id)?;
                let TaskPayload::ThreeAfc { triplet_index, triplet, position_shown, .. } = task.payload else {
                    return Err(CollectorError::Storage("judgment for non-3AFC task".into()));
                };
                match slot {
                    Some(s) => {
                        self.triplet_answered[triplet_index] += 1;
                        self.judgments.push(JudgmentRecord {
                            triplet,
                            odd_one_out: position_shown[s as usize],
                            annotator_id: task.annotator_id,
                            response_ms,
                            position_shown: Some(position_shown),
                        });
                    }
                    None => self.empty_submissions.push(EmptySubmission { triplet, annotator_id: task.annotator_id }),
                }
            }
            Event::RatingSubmitted { task_id, column_percentile } => {
                let task = self.answer(&task_id)?;
                let TaskPayload::GridRating { dimension, probe_stimulus, .. } = task.payload else {
                    return Err(CollectorError::Storage("rating for non-rating task".into()));
                };
                self.ratings.push(GridRating {
                    dimension,
                    probe_stimulus,
                    column_percentile,
                    annotator_id: task.annotator_id,
                });
            }
            Event::LabelsSubmitted { task_id, text } => {
                let task = self.answer(&task_id)?;
                let TaskPayload::GridLabel { dimension, .. } = task.payload else {
                    return Err(CollectorError::Storage("labels for non-label task".into()));
                };
                self.labels.push(GridLabel { dimension, text, annotator_id: task.annotator_id });
            }
        }
        Ok(())
    }

    fn answer(&mut self, task_id: &str) -> Result<Task> {
        let seq = task_seq(task_id).ok_or_else(|| CollectorError::Storage("bad task id".into()))?;
        let task = self.tasks.get_mut(&seq).ok_or_else(|| CollectorError::Storage(format!("unknown task {task_id}")))?;
        task.answered = true;
        let task = task.clone();
        let a = self.index.by_id[&task.annotator_id];
        self.annotators[a].tasks_completed += 1;
        Ok(task)
    }
}

fn seen_key(annotator: usize, payload: &TaskPayload) -> (usize, TaskKind, usize) {
    let item = match payload {
        TaskPayload::ThreeAfc { triplet_index, .. } => *triplet_index,
        TaskPayload::GridRating { pair_index, .. } => *pair_index,
        TaskPayload::GridLabel { grid_index, .. } => *grid_index,
    };
    (annotator, payload.kind(), item)
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn random_hex(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::rng().fill_bytes(&mut buf);
    hex::encode(buf)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Demographics {
    pub age_group: Option<String>,
    pub gender_identity: Option<String>,
    pub nationality: Option<String>,
    pub ancestry: Option<String>,
    pub subregional_ancestry: Option<String>,
}

/// Absent flags mean no consent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Consent {
    pub collection: bool,
    pub usage: bool,
    pub publication: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub annotator_id: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextTask {
    Assigned { task: Task },
    /// Nothing left for this annotator in the requested pool.
    Complete { kind: TaskKind },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionProgress {
    pub annotator_id: String,
    pub created_at_ms: u64,
    pub tasks_served: u64,
    pub tasks_completed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotators: usize,
    pub judgments: usize,
    pub empty_submissions: usize,
    pub ratings: usize,
    pub labels: usize,
    pub triplets: usize,
    /// Triplets with the target number of answered judgments.
    pub triplets_complete: usize,
    pub session: Option<SessionProgress>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub directory: PathBuf,
    pub qc: bool,
    pub annotators: usize,
    pub judgments: usize,
    pub empty_submissions: usize,
    pub ratings: usize,
    pub labels: usize,
    pub exclusions: Option<ExclusionReport>,
}

struct Inner {
    state: State,
    log: EventLog,
    events: u64,
    rng: ChaCha8Rng,
}

pub struct Collector {
    config: CollectorConfig,
    inner: Mutex<Inner>,
}

impl Collector {
    /// Opens the campaign in `config.data_dir`, replaying any prior log.
    pub fn open(config: CollectorConfig) -> Result<Collector> {
        config.validate()?;
        let dir = config.data_dir.clone();
        let (log, events) = EventLog::open::<Event>(&dir)?;
        let (mut state, skip) = match read_snapshot::<State>(&dir)? {
            Some(s) if s.events <= events.len() as u64 => (s.state, s.events),
            _ => (State::sized(&config), 0),
        };
        state.rebuild_index();
        let total = events.len() as u64;
        for e in events.into_iter().skip(skip as usize) {
            state.apply(e)?;
        }
        let rng = match config.seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_rng(&mut rand::rng()),
        };
        let fingerprint = config.fingerprint();
        let mut inner = Inner { state, log, events: total, rng };
        match &inner.state.fingerprint {
            Some(f) if *f != fingerprint => {
                return Err(CollectorError::Invalid(format!(
                    "{} belongs to a different campaign (pool, targets or grids changed)",
                    dir.display()
                )))
            }
            Some(_) => {}
            None => Self::commit_inner(&config, &mut inner, Event::CampaignOpened { fingerprint })?,
        }
        Ok(Collector { config, inner: Mutex::new(inner) })
    }

    pub fn config(&self) -> &CollectorConfig {
        &self.config
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn commit_inner(config: &CollectorConfig, inner: &mut Inner, event: Event) -> Result<()> {
        inner.log.append(&event)?;
        inner.events += 1;
        inner.state.apply(event)?;
        if config.snapshot_every > 0 && inner.events % config.snapshot_every == 0 {
            write_snapshot(&config.data_dir, &Snapshot { events: inner.events, state: &inner.state })?;
        }
        Ok(())
    }

    fn session(state: &State, token: Option<&str>) -> Result<usize> {
        let token = token.ok_or(CollectorError::Unauthorized)?;
        state.index.by_token.get(&sha256_hex(token)).copied().ok_or(CollectorError::Unauthorized)
    }

    pub fn register(&self, demographics: Demographics, consent: Consent) -> Result<Registration> {
        if !(consent.collection && consent.usage && consent.publication) {
            return Err(CollectorError::ConsentRequired);
        }
        let mut inner = self.lock();
        let (annotator_id, token) = loop {
            let id = format!("a{}", random_hex(8));
            if !inner.state.index.by_id.contains_key(&id) {
                break (id, random_hex(32));
            }
        };
        let annotator = Annotator {
            id: annotator_id.clone(),
            age_group: demographics.age_group,
            gender_identity: demographics.gender_identity,
            nationality: demographics.nationality,
            ancestry: demographics.ancestry,
            subregional_ancestry: demographics.subregional_ancestry,
        };
        let event = Event::AnnotatorRegistered { annotator, token_sha256: sha256_hex(&token), at_ms: now_ms() };
        Self::commit_inner(&self.config, &mut inner, event)?;
        Ok(Registration { annotator_id, token })
    }

    pub fn next_task(&self, token: Option<&str>, kind: TaskKind) -> Result<NextTask> {
        let mut inner = self.lock();
        let a = Self::session(&inner.state, token)?;
        let st = &inner.state;
        let pick = |served: &[u32], target: usize| -> Option<usize> {
            (0..served.len())
                .filter(|&i| (served[i] as usize) < target && !st.index.seen.contains(&(a, kind, i)))
                .min_by_key(|&i| (served[i], i))
        };
        let payload = match kind {
            TaskKind::ThreeAfc => pick(&st.triplet_served, self.config.judgments_per_triplet).map(|i| {
                let triplet = self.config.triplets[i].ids().clone();
                let mut shown = [0u8, 1, 2];
                shown.shuffle(&mut inner.rng);
                let display = shown.map(|t| triplet[t as usize].clone());
                TaskPayload::ThreeAfc { triplet_index: i, triplet, position_shown: shown, display }
            }),
            TaskKind::GridRating => pick(&st.rating_served, self.config.ratings_per_probe).map(|i| {
                let n = self.config.probes.len();
                TaskPayload::GridRating {
                    pair_index: i,
                    dimension: self.config.grids[i / n].dimension,
                    probe_stimulus: self.config.probes[i % n].clone(),
                }
            }),
            TaskKind::GridLabel => pick(&st.label_served, self.config.labels_per_grid)
                .map(|i| TaskPayload::GridLabel { grid_index: i, dimension: self.config.grids[i].dimension }),
        };
        let Some(payload) = payload else {
            return Ok(NextTask::Complete { kind });
        };
        let task = Task {
            task_id: format!("t{}", inner.state.next_task),
            annotator_id: inner.state.annotators[a].annotator.id.clone(),
            payload,
            issued_at_ms: now_ms(),
            answered: false,
        };
        Self::commit_inner(&self.config, &mut inner, Event::TaskIssued { task: task.clone() })?;
        Ok(NextTask::Assigned { task })
    }

    /// Looks up an unanswered task of `kind` owned by the session.
    fn owned_task(state: &State, token: Option<&str>, task_id: &str, kind: TaskKind) -> Result<Task> {
        let a = Self::session(state, token)?;
        let task = state.task(task_id)?;
        if task.annotator_id != state.annotators[a].annotator.id {
            return Err(CollectorError::Forbidden(format!("task {task_id} belongs to another annotator")));
        }
        if task.payload.kind() != kind {
            return Err(CollectorError::Invalid(format!("task {task_id} is not a {kind:?} task")));
        }
        if task.answered {
            return Err(CollectorError::Conflict(format!("task {task_id} was already answered")));
        }
        Ok(task.clone())
    }

    /// `slot` is the screen position chosen; `None` records an empty
    /// submission. `response_ms` is the client-measured time and must not
    /// exceed the server-observed time since issue.
    pub fn submit_judgment(
        &self,
        token: Option<&str>,
        task_id: &str,
        slot: Option<u8>,
        response_ms: Option<u64>,
    ) -> Result<()> {
        let mut inner = self.lock();
        let task = Self::owned_task(&inner.state, token, task_id, TaskKind::ThreeAfc)?;
        if let Some(s) = slot {
            if s > 2 {
                return Err(CollectorError::Invalid(format!("choice must be 0, 1 or 2, got {s}")));
            }
        }
        let elapsed = now_ms().saturating_sub(task.issued_at_ms);
        if let Some(ms) = response_ms {
            if ms > elapsed {
                return Err(CollectorError::Invalid(format!(
                    "response_ms {ms} exceeds the {elapsed} ms since the task was issued"
                )));
            }
        }
        let event = Event::JudgmentSubmitted { task_id: task_id.to_string(), slot, response_ms, server_elapsed_ms: elapsed };
        Self::commit_inner(&self.config, &mut inner, event)
    }

    pub fn submit_rating(&self, token: Option<&str>, task_id: &str, column_percentile: u8) -> Result<()> {
        let mut inner = self.lock();
        let task = Self::owned_task(&inner.state, token, task_id, TaskKind::GridRating)?;
        if !(1..=100).contains(&column_percentile) {
            return Err(CollectorError::Invalid(format!(
                "column_percentile must be in [1, 100], got {column_percentile}"
            )));
        }
        let event = Event::RatingSubmitted { task_id: task.task_id, column_percentile };
        Self::commit_inner(&self.config, &mut inner, event)
    }

    pub fn submit_labels(&self, token: Option<&str>, task_id: &str, text: Vec<String>) -> Result<()> {
        let mut inner = self.lock();
        let task = Self::owned_task(&inner.state, token, task_id, TaskKind::GridLabel)?;
        let TaskPayload::GridLabel { dimension, .. } = task.payload else { unreachable!() };
        GridLabel { dimension, text: text.clone(), annotator_id: task.annotator_id }
            .validate()
            .map_err(|e| CollectorError::Invalid(e.to_string()))?;
        let event = Event::LabelsSubmitted { task_id: task.task_id, text };
        Self::commit_inner(&self.config, &mut inner, event)
    }

    pub fn progress(&self, token: Option<&str>) -> Result<Progress> {
        let inner = self.lock();
        let st = &inner.state;
        let session = match token {
            None => None,
            Some(_) => {
                let a = &st.annotators[Self::session(st, token)?];
                Some(SessionProgress {
                    annotator_id: a.annotator.id.clone(),
                    created_at_ms: a.created_at_ms,
                    tasks_served: a.tasks_served,
                    tasks_completed: a.tasks_completed,
                })
            }
        };
        Ok(Progress {
            annotators: st.annotators.len(),
            judgments: st.judgments.len(),
            empty_submissions: st.empty_submissions.len(),
            ratings: st.ratings.len(),
            labels: st.labels.len(),
            triplets: self.config.triplets.len(),
            triplets_complete: st
                .triplet_answered
                .iter()
                .filter(|&&n| n as usize >= self.config.judgments_per_triplet)
                .count(),
            session,
        })
    }

    pub fn check_admin(&self, token: Option<&str>) -> Result<()> {
        let given = token.ok_or(CollectorError::AdminRequired)?;
        // compare digests to keep the comparison length-independent
        if sha256_hex(given) == sha256_hex(&self.config.admin_token) {
            Ok(())
        } else {
            Err(CollectorError::AdminRequired)
        }
    }

    /// Everything collected so far, in log order.
    pub fn corpus(&self) -> Corpus {
        let inner = self.lock();
        let st = &inner.state;
        Corpus {
            stimuli: self.config.stimuli.clone(),
            annotators: st.annotators.iter().map(|a| a.annotator.clone()).collect(),
            judgments: st.judgments.clone(),
            ratings: st.ratings.clone(),
            labels: st.labels.clone(),
            empty_submissions: st.empty_submissions.clone(),
        }
    }

    /// Writes the canonical corpus files to `out`. With `qc`, the configured
    /// policies run first and every record of an excluded annotator is
    /// dropped; the report is written to `exclusions.json`.
    pub fn export(&self, out: &Path, qc: bool) -> Result<ExportSummary> {
        let corpus = self.corpus();
        let (corpus, exclusions) = if qc {
            let (kept, report) = apply_quality_control(&corpus, &self.config.qc_policies)?;
            (kept, Some(report))
        } else {
            (corpus, None)
        };
        corpus.save_dir(out)?;
        for (name, empty) in [("ratings.jsonl", corpus.ratings.is_empty()), ("labels.jsonl", corpus.labels.is_empty())] {
            // always emit the file so an export directory is complete
            if empty {
                std::fs::write(out.join(name), "").map_err(CollectorError::storage)?;
            }
        }
        let exclusions_path = out.join("exclusions.json");
        match &exclusions {
            Some(r) => std::fs::write(&exclusions_path, serde_json::to_string_pretty(r).map_err(CollectorError::storage)?)
                .map_err(CollectorError::storage)?,
            None if exclusions_path.exists() => std::fs::remove_file(&exclusions_path).map_err(CollectorError::storage)?,
            None => {}
        }
        Ok(ExportSummary {
            directory: out.to_path_buf(),
            qc,
            annotators: corpus.annotators.len(),
            judgments: corpus.judgments.len(),
            empty_submissions: corpus.empty_submissions.len(),
            ratings: corpus.ratings.len(),
            labels: corpus.labels.len(),
            exclusions,
        })
    }

    pub fn grid(&self, dimension: usize) -> Result<&GridSpec> {
        self.config
            .grids
            .iter()
            .find(|g| g.dimension == dimension)
            .ok_or_else(|| CollectorError::NotFound(format!("no grid for dimension {dimension}")))
    }

    /// Image file for a stimulus, resolved inside the configured directory.
    pub fn image_path(&self, stimulus_id: &str) -> Result<PathBuf> {
        let dir = self
            .config
            .image_dir
            .as_ref()
            .ok_or_else(|| CollectorError::NotFound("no image directory configured".into()))?;
        let s = self
            .config
            .stimuli
            .iter()
            .find(|s| s.id == stimulus_id)
            .ok_or_else(|| CollectorError::NotFound(format!("unknown stimulus {stimulus_id}")))?;
        let rel = Path::new(&s.source_ref);
        if !rel.components().all(|c| matches!(c, std::path::Component::Normal(_))) {
            return Err(CollectorError::Forbidden(format!("source_ref {} escapes the image directory", s.source_ref)));
        }
        Ok(dir.join(rel))
    }

    /// Number of events in the log.
    pub fn events(&self) -> u64 {
        self.lock().events
    }

    /// Random bits for callers that need a one-off draw under the same
    /// seeding policy as display permutations.
    pub fn random_u64(&self) -> u64 {
        self.lock().rng.random()
    }
}
