//! Subcommand bodies. Each reads only its resolved keys, writes its outputs
//! and returns a JSON summary for stdout.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use oddity_collector::{Collector, CollectorConfig};
use oddity_core::corpus::{apply_quality_control, load_corpus, read_jsonl, split, Corpus, DemographicField, GridRating, QcPolicy, Stimulus};
use oddity_core::embedder::{evaluate_judgments, load_checkpoint, save_checkpoint, train, Mode, ModelParams, PenaltyWeights, TrainConfig};
use oddity_core::evaluator::{
    annotator_swap_test, bayes_accuracy, dimension_elimination_curve, elimination_csv, entropy_correlation,
    matrix_pearson, matrix_spearman, similarity_matrix_human, similarity_matrix_model, AnnotatorPolicy, TripletVoteTable,
};
use oddity_core::insight::{
    binary_auc, build_grid, dimension_values, disparity_estimate, external_rating_correlation, human_embedding_from_ratings,
    load_external_ratings, mask_group_auc, GridSpec, SubsetSpec,
};
use oddity_core::pruner::{default_threshold_grid, prune_dimensions};
use oddity_core::sampler::{enumerate_all_triplets, read_triplets, sample_triplets, write_triplets, TripletKey};
use oddity_core::synthdata::{generate_world, oracle_ceiling_for_judgments, sample_judgments, AnnotatorAssignment, SyntheticWorld, WorldConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Resolved;
use crate::manifest::write_file;

pub const CAMPAIGN_FILE: &str = "campaign.json";

pub fn execute(r: &Resolved) -> Result<Value> {
    match r.spec.path {
        "ingest" => ingest(r),
        "qc" => qc(r),
        "sample-triplets" => sample(r),
        "train" => train_cmd(r),
        "prune" => prune(r),
        "eval accuracy" => eval_accuracy(r),
        "eval entropy" => eval_entropy(r),
        "eval simmatrix" => eval_simmatrix(r),
        "eval elimination" => eval_elimination(r),
        "eval swap" => eval_swap(r),
        "eval bayes" => eval_bayes(r),
        "analyze masks-auc" => masks_auc(r),
        "analyze grid" => grid(r),
        "analyze human-embed" => human_embed(r),
        "analyze disparity" => disparity(r),
        "analyze external-corr" => external_corr(r),
        "analyze binary-auc" => auc(r),
        "synth world" => synth_world(r),
        "synth judgments" => synth_judgments(r),
        "synth ceiling" => synth_ceiling(r),
        "serve" => serve(r),
        "export" => export(r),
        other => bail!("no implementation for {other}"),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// Writes `v` to `--out` and returns it as the summary.
fn report(r: &Resolved, v: Value) -> Result<Value> {
    write_json(&r.path("out")?, &v)?;
    Ok(v)
}

fn corpus(r: &Resolved, key: &str) -> Result<Corpus> {
    let p = r.path(key)?;
    Corpus::load_dir(&p).with_context(|| format!("loading corpus {}", p.display()))
}

fn model(r: &Resolved) -> Result<ModelParams> {
    let p = r.path("model")?;
    load_checkpoint(&p).with_context(|| format!("loading checkpoint {}", p.display()))
}

/// A file, or the named file inside a directory.
fn file_or_member(path: PathBuf, member: &str) -> PathBuf {
    if path.is_dir() {
        path.join(member)
    } else {
        path
    }
}

fn read_stimuli(path: PathBuf) -> Result<Vec<Stimulus>> {
    let p = file_or_member(path, "stimuli.jsonl");
    Ok(read_jsonl::<Stimulus>(&p)?.into_iter().map(|(_, s)| s).collect())
}

fn policies(r: &Resolved) -> Result<Option<Vec<QcPolicy>>> {
    let Some(p) = r.path_opt("policies") else { return Ok(None) };
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let list: Vec<QcPolicy> = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    for pol in &list {
        pol.validate()?;
    }
    Ok(Some(list))
}

fn annotator_policy(r: &Resolved) -> Result<AnnotatorPolicy> {
    Ok(match r.str("policy")? {
        "judges" => AnnotatorPolicy::JudgesOfTriplet,
        "unconditional" => AnnotatorPolicy::Unconditional,
        id => AnnotatorPolicy::Fixed(id.to_string()),
    })
}

fn counts(c: &Corpus) -> Value {
    json!({
        "stimuli": c.stimuli.len(),
        "annotators": c.annotators.len(),
        "judgments": c.judgments.len(),
        "empty_submissions": c.empty_submissions.len(),
        "ratings": c.ratings.len(),
        "labels": c.labels.len(),
    })
}

fn ingest(r: &Resolved) -> Result<Value> {
    let mut c = load_corpus(&r.path("stimuli")?, &r.path("annotators")?, &r.path("judgments")?)?;
    if let Some(p) = r.path_opt("ratings") {
        c.load_ratings(&p)?;
    }
    if let Some(p) = r.path_opt("labels") {
        c.load_labels(&p)?;
    }
    c.validate()?;
    c.save_dir(&r.path("out")?)?;
    Ok(counts(&c))
}

fn qc(r: &Resolved) -> Result<Value> {
    let c = corpus(r, "corpus")?;
    let pols = policies(r)?.unwrap_or_else(QcPolicy::defaults);
    let (kept, report) = apply_quality_control(&c, &pols)?;
    let out = r.path("out")?;
    kept.save_dir(&out)?;
    write_json(&out.join("exclusions.json"), &report)?;
    Ok(json!({ "retained": counts(&kept), "exclusions": report }))
}

fn sample(r: &Resolved) -> Result<Value> {
    let ids: Vec<String> = read_stimuli(r.path("stimuli")?)?.into_iter().map(|s| s.id).collect();
    let exclude: HashSet<TripletKey> = match r.path_opt("exclude") {
        Some(p) => read_triplets(&p)?.into_iter().collect(),
        None => HashSet::new(),
    };
    let triplets = if r.flag("all")? {
        if r.opt("count").is_some() {
            bail!("--all and --count are mutually exclusive");
        }
        enumerate_all_triplets(&ids)?.into_iter().filter(|t| !exclude.contains(t)).collect()
    } else {
        let count: usize = r.parse_opt("count")?.ok_or_else(|| anyhow!("give --count or --all"))?;
        sample_triplets(&ids, count, r.parse("seed")?, &exclude)?
    };
    write_triplets(&r.path("out")?, &triplets)?;
    Ok(json!({ "stimuli": ids.len(), "triplets": triplets.len() }))
}

fn train_cmd(r: &Resolved) -> Result<Value> {
    let all = corpus(r, "train")?;
    let seed: u64 = r.parse("seed")?;
    let fraction: f64 = r.parse("validation-fraction")?;
    let (tr, va) = match r.opt("validation") {
        Some(_) => {
            if fraction != 0.0 {
                bail!("give either --validation or --validation-fraction, not both");
            }
            (all, Some(corpus(r, "validation")?))
        }
        None if fraction > 0.0 => {
            let (t, v) = split(&all, fraction, seed)?;
            (t, Some(v))
        }
        None => (all, None),
    };
    let cfg = TrainConfig {
        mode: Mode::parse(r.str("mode")?)?,
        dims: r.parse("dims")?,
        epochs: r.parse("epochs")?,
        batch_size: r.parse("batch-size")?,
        learning_rate: r.parse("lr")?,
        penalties: PenaltyWeights { alpha1: r.parse("alpha1")?, alpha2: r.parse("alpha2")?, alpha3: r.parse("alpha3")? },
        seed,
        freeze_embeddings: r.flag("freeze-embeddings")?,
        init_scale: r.parse("init-scale")?,
    };
    let warm = r.path_opt("warm-start").map(|p| load_checkpoint(&p)).transpose()?;
    let (params, history) = train(&tr, va.as_ref(), &cfg, warm.as_ref())?;
    save_checkpoint(&params, &r.path("out")?)?;
    if let Some(h) = r.path_opt("history") {
        write_file(&h, history.to_csv().as_bytes())?;
    }
    let last = history.last().expect("at least one epoch");
    Ok(json!({
        "mode": r.str("mode")?,
        "dims": params.dims(),
        "train_judgments": tr.judgments.len(),
        "validation_judgments": va.as_ref().map(|v| v.judgments.len()),
        "final_train_loss": last.train_loss,
        "final_val_loss": last.val_loss,
        "final_val_accuracy": last.val_accuracy,
    }))
}

fn prune(r: &Resolved) -> Result<Value> {
    let params = model(r)?;
    let va = corpus(r, "validation")?;
    let grid: Vec<f64> = match r.opt("thresholds") {
        None => default_threshold_grid(),
        Some(_) => r
            .list("thresholds")
            .iter()
            .map(|t| t.parse::<f64>().map_err(|e| anyhow!("invalid threshold {t:?}: {e}")))
            .collect::<Result<_>>()?,
    };
    let res = prune_dimensions(&params, &va.judgments, &grid)?;
    let pruned = params.with_dims_zeroed_except(&res.retained_dims);
    save_checkpoint(&pruned, &r.path("out")?)?;
    if let Some(p) = r.path_opt("report") {
        write_file(&p, res.to_csv().as_bytes())?;
    }
    Ok(json!({
        "threshold": res.threshold,
        "val_accuracy": res.val_accuracy,
        "retained_count": res.retained_dims.len(),
        "retained_dims": res.retained_dims,
    }))
}

fn eval_accuracy(r: &Resolved) -> Result<Value> {
    let params = model(r)?;
    let c = corpus(r, "corpus")?;
    let (loss, acc) = evaluate_judgments(&params, &c.judgments)?;
    report(r, json!({ "judgments": c.judgments.len(), "accuracy": acc, "mean_nll": loss }))
}

fn eval_entropy(r: &Resolved) -> Result<Value> {
    let params = model(r)?;
    let votes = TripletVoteTable::from_judgments(&corpus(r, "corpus")?.judgments)?;
    let rho = entropy_correlation(&votes, &params, &annotator_policy(r)?)?;
    report(r, json!({ "triplets": votes.len(), "spearman": rho }))
}

fn eval_simmatrix(r: &Resolved) -> Result<Value> {
    let params = model(r)?;
    let votes = TripletVoteTable::from_judgments(&corpus(r, "corpus")?.judgments)?;
    let human = similarity_matrix_human(&votes)?;
    let m = similarity_matrix_model(&params, &votes.contexts(), &annotator_policy(r)?)?;
    let out = r.path("out")?;
    write_file(&out.join("model.csv"), m.to_csv().as_bytes())?;
    write_file(&out.join("human.csv"), human.to_csv().as_bytes())?;
    let v = json!({
        "stimuli": m.stimuli.len(),
        "triplets": votes.len(),
        "spearman": matrix_spearman(&m, &human)?,
        "pearson": matrix_pearson(&m, &human)?,
    });
    write_json(&out.join("report.json"), &v)?;
    Ok(v)
}

fn eval_elimination(r: &Resolved) -> Result<Value> {
    let params = model(r)?;
    let c = corpus(r, "corpus")?;
    let votes = match r.opt("votes") {
        Some(_) => Some(TripletVoteTable::from_judgments(&corpus(r, "votes")?.judgments)?),
        None => None,
    };
    let curve = dimension_elimination_curve(&params, &c.judgments, votes.as_ref())?;
    write_file(&r.path("out")?, elimination_csv(&curve).as_bytes())?;
    let full = curve.first().map(|p| p.accuracy).unwrap_or(0.0);
    // fewest dimensions still reaching 95% of the full accuracy
    let d95 = curve.iter().filter(|p| p.accuracy >= 0.95 * full).map(|p| p.dims_remaining).min();
    Ok(json!({ "points": curve.len(), "full_accuracy": full, "dims_at_95pct": d95 }))
}

fn eval_swap(r: &Resolved) -> Result<Value> {
    let params = model(r)?;
    let c = corpus(r, "corpus")?;
    let rep = annotator_swap_test(&params, &c.judgments, r.parse("repeats")?, r.parse("seed")?)?;
    report(r, serde_json::to_value(rep)?)
}

fn eval_bayes(r: &Resolved) -> Result<Value> {
    let c = corpus(r, "corpus")?;
    let votes = TripletVoteTable::from_judgments(&c.judgments)?;
    report(r, json!({ "triplets": votes.len(), "judgments": c.judgments.len(), "bayes_accuracy": bayes_accuracy(&votes)? }))
}

fn masks_auc(r: &Resolved) -> Result<Value> {
    let params = model(r)?;
    let c = corpus(r, "corpus")?;
    let rep = mask_group_auc(
        &params,
        &c,
        DemographicField::parse(r.str("field")?)?,
        r.parse("min-judgments")?,
        r.parse("folds")?,
        r.parse("seed")?,
    )?;
    report(r, serde_json::to_value(rep)?)
}

fn grid(r: &Resolved) -> Result<Value> {
    let g = build_grid(&model(r)?, r.parse("dim")?, None)?;
    write_file(&r.path("out")?, g.to_json().as_bytes())?;
    Ok(json!({ "dimension": g.dimension, "underfilled": g.underfilled }))
}

fn load_grids(paths: &[String]) -> Result<Vec<GridSpec>> {
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading grid {p}"))?;
            GridSpec::from_json(&text).with_context(|| format!("parsing grid {p}"))
        })
        .collect()
}

fn human_embed(r: &Resolved) -> Result<Value> {
    let p = file_or_member(r.path("ratings")?, "ratings.jsonl");
    let ratings: Vec<GridRating> = read_jsonl(&p)?.into_iter().map(|(_, g)| g).collect();
    let grids = load_grids(&r.list("grids"))?;
    let vecs = human_embedding_from_ratings(&ratings, &grids)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["stimulus_id".to_string()];
    header.extend(grids.iter().map(|g| format!("dim_{}", g.dimension)));
    w.write_record(&header)?;
    for (probe, v) in &vecs {
        let mut row = vec![probe.clone()];
        row.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    write_file(&r.path("out")?, &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    Ok(json!({ "probes": vecs.len(), "components": grids.len(), "ratings": ratings.len() }))
}

fn disparity(r: &Resolved) -> Result<Value> {
    let scores = load_external_ratings(&r.path("scores")?)?;
    let p = r.path("subsets")?;
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let subsets: Vec<SubsetSpec> = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    let rep = disparity_estimate(&scores, &subsets, r.parse("cap")?)?;
    report(r, serde_json::to_value(rep)?)
}

fn external_corr(r: &Resolved) -> Result<Value> {
    let dim: usize = r.parse("dim")?;
    let values = dimension_values(&model(r)?, dim)?;
    let ext = load_external_ratings(&r.path("ratings")?)?;
    let rho = external_rating_correlation(&values, &ext)?;
    report(r, json!({ "dimension": dim, "rated_stimuli": ext.len(), "spearman": rho }))
}

#[derive(Deserialize)]
struct ScoreRow {
    score: f64,
    label: String,
}

fn auc(r: &Resolved) -> Result<Value> {
    let p = r.path("scores")?;
    let mut rdr = csv::Reader::from_path(&p).with_context(|| format!("reading {}", p.display()))?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, row) in rdr.deserialize::<ScoreRow>().enumerate() {
        let row = row.with_context(|| format!("{}:{}", p.display(), i + 2))?;
        let label = match row.label.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => bail!("{}:{}: label must be 0/1 or false/true, got {other:?}", p.display(), i + 2),
        };
        scores.push(row.score);
        labels.push(label);
    }
    let a = binary_auc(&scores, &labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    report(r, json!({ "auc": a, "positives": pos, "negatives": labels.len() - pos }))
}

fn synth_world(r: &Resolved) -> Result<Value> {
    let mut cfg = WorldConfig::new(r.parse("stimuli")?, r.parse("annotators")?, r.parse("dims")?, r.parse("sparsity")?, r.parse("seed")?);
    cfg.value_scale = r.parse("scale")?;
    cfg.populations = r.parse("populations")?;
    cfg.population_separation = r.parse("separation")?;
    cfg.mask_jitter = r.parse("jitter")?;
    let w = generate_world(&cfg)?;
    w.save(&r.path("out")?)?;
    Ok(json!({ "stimuli": w.stimulus_ids.len(), "annotators": w.annotator_ids.len(), "dims": cfg.dims }))
}

fn parse_assignment(s: &str) -> Result<AnnotatorAssignment> {
    Ok(match s {
        "round_robin" => AnnotatorAssignment::RoundRobin,
        "uniform" => AnnotatorAssignment::UniformRandom,
        other => match other.strip_prefix("fixed:") {
            Some(k) => AnnotatorAssignment::Fixed(k.parse().map_err(|e| anyhow!("invalid annotator row {k:?}: {e}"))?),
            None => bail!("assignment must be round_robin, uniform or fixed:<row>, got {other:?}"),
        },
    })
}

fn synth_judgments(r: &Resolved) -> Result<Value> {
    let w = SyntheticWorld::load(&r.path("world")?)?;
    let seed: u64 = r.parse("seed")?;
    let triplets = match r.path_opt("triplets") {
        Some(p) => read_triplets(&p)?,
        None => sample_triplets(&w.stimulus_ids, r.parse("count")?, seed, &HashSet::new())?,
    };
    let js = sample_judgments(&w, &triplets, r.parse("per-triplet")?, &parse_assignment(r.str("assignment")?)?, seed)?;
    let c = w.corpus(js);
    c.save_dir(&r.path("out")?)?;
    Ok(counts(&c))
}

fn synth_ceiling(r: &Resolved) -> Result<Value> {
    let w = SyntheticWorld::load(&r.path("world")?)?;
    let c = corpus(r, "corpus")?;
    report(r, json!({ "judgments": c.judgments.len(), "oracle_ceiling": oracle_ceiling_for_judgments(&w, &c.judgments)? }))
}

/// Campaign definition persisted beside the event log so offline exports
/// can reopen it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub stimuli: Vec<Stimulus>,
    pub triplets: Vec<[String; 3]>,
    pub judgments_per_triplet: usize,
    pub grids: Vec<GridSpec>,
    pub probes: Vec<String>,
    pub ratings_per_probe: usize,
    pub labels_per_grid: usize,
    pub qc_policies: Vec<QcPolicy>,
}

impl Campaign {
    fn config(&self, data_dir: PathBuf, admin_token: &str) -> Result<CollectorConfig> {
        let triplets = self.triplets.iter().map(TripletKey::from_ids).collect::<oddity_core::Result<Vec<_>>>()?;
        let mut cfg = CollectorConfig::new(data_dir, self.stimuli.clone(), triplets, admin_token);
        cfg.judgments_per_triplet = self.judgments_per_triplet;
        cfg.grids = self.grids.clone();
        cfg.probes = self.probes.clone();
        cfg.ratings_per_probe = self.ratings_per_probe;
        cfg.labels_per_grid = self.labels_per_grid;
        cfg.qc_policies = self.qc_policies.clone();
        Ok(cfg)
    }
}

fn serve(r: &Resolved) -> Result<Value> {
    let data_dir = r.path("data-dir")?;
    let campaign = Campaign {
        stimuli: read_stimuli(r.path("stimuli")?)?,
        triplets: read_triplets(&r.path("triplets")?)?.iter().map(|t| t.ids().clone()).collect(),
        judgments_per_triplet: r.parse("judgments-per-triplet")?,
        grids: load_grids(&r.list("grids"))?,
        probes: r.list("probes"),
        ratings_per_probe: r.parse("ratings-per-probe")?,
        labels_per_grid: r.parse("labels-per-grid")?,
        qc_policies: policies(r)?.unwrap_or_else(QcPolicy::defaults),
    };
    let mut cfg = campaign.config(data_dir.clone(), r.str("admin-token")?)?;
    cfg.image_dir = r.path_opt("image-dir");
    cfg.snapshot_every = r.parse("snapshot-every")?;
    let addr: std::net::SocketAddr = r.parse("addr")?;
    // opening validates the campaign against any existing log first
    drop(Collector::open(cfg.clone())?);
    write_json(&data_dir.join(CAMPAIGN_FILE), &campaign)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(oddity_collector::serve(cfg, addr))?;
    Ok(json!({ "data_dir": data_dir, "stopped": true }))
}

fn export(r: &Resolved) -> Result<Value> {
    let data_dir = r.path("data-dir")?;
    let p = data_dir.join(CAMPAIGN_FILE);
    let text = std::fs::read_to_string(&p).with_context(|| format!("{} is not a campaign directory", data_dir.display()))?;
    let mut campaign: Campaign = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    if let Some(pols) = policies(r)? {
        campaign.qc_policies = pols;
    }
    // the admin token only gates HTTP; offline access is by filesystem
    let c = Collector::open(campaign.config(data_dir, "offline-export")?)?;
    let summary = c.export(&r.path("out")?, r.flag("qc")?)?;
    Ok(serde_json::to_value(summary)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_parse() {
        assert_eq!(parse_assignment("round_robin").unwrap(), AnnotatorAssignment::RoundRobin);
        assert_eq!(parse_assignment("fixed:3").unwrap(), AnnotatorAssignment::Fixed(3));
        assert!(parse_assignment("fixed:x").is_err());
        assert!(parse_assignment("roundrobin").is_err());
    }
}
