//! Acceptance gate. Prints one line per criterion:
//!
//! ```text
//! PASS  gradient-correctness     0.4s / 10s   max rel err 2.1e-10 over 20 instances
//! ```
//!
//! A criterion fails when its check fails or it overruns its time budget.
//! Criteria that need unavailable data print `SKIP`. The process exits 0
//! unless `ODDITY_ACCEPTANCE_STRICT=1` is set and something failed.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use oddity_core::corpus::{split, Corpus, DemographicField, JudgmentRecord};
use oddity_core::embedder::{gradients, loss, train, Mode, ModelParams, PenaltyWeights, TrainConfig};
use oddity_core::evaluator::{accuracy, annotator_swap_test};
use oddity_core::insight::{binary_auc, disparity_estimate, mask_group_auc, SubsetSpec, DEFAULT_DISPARITY_CAP};
use oddity_core::pruner::{default_threshold_grid, match_dimensions, median_match, prune_dimensions};
use oddity_core::sampler::sample_triplets;
use oddity_core::synthdata::{
    generate_world, oracle_ceiling_for_judgments, sample_judgments, AnnotatorAssignment, SyntheticWorld, WorldConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Checked { pass: bool, detail: String },
    NotRun(String),
}

fn checked(pass: bool, detail: String) -> Outcome {
    Outcome::Checked { pass, detail }
}

#[derive(Default)]
struct Tally {
    passed: usize,
    failed: usize,
    skipped: usize,
}

impl Tally {
    fn gate(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let outcome = f();
        let took = t0.elapsed();
        let clock = format!("{:.1}s / {}s", took.as_secs_f64(), budget.as_secs());
        match outcome {
            Outcome::NotRun(why) => {
                self.skipped += 1;
                println!("SKIP  {name:<26} {:<14} {why}", "-");
            }
            Outcome::Checked { pass, detail } => {
                let in_time = took <= budget;
                let ok = pass && in_time;
                let late = if in_time { "" } else { " (over budget)" };
                if ok {
                    self.passed += 1;
                } else {
                    self.failed += 1;
                }
                println!("{}  {name:<26} {clock:<14} {detail}{late}", if ok { "PASS" } else { "FAIL" });
            }
        }
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let h = 1e-5;
    // relative to max(|a|, |b|, 1) so near-zero partials are judged absolutely
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let mode = [Mode::U, Mode::C, Mode::Cph][inst % 3];
        let n = rng.random_range(3..=6);
        let a = if mode == Mode::U { 0 } else { rng.random_range(1..=3) };
        let d = rng.random_range(1..=4);
        // raw values stay away from the relu kink
        let w = Array2::from_shape_fn((n, d), |_| {
            let mag = rng.random_range(0.1..1.5);
            if rng.random::<f64>() < 0.25 { -mag } else { mag }
        });
        let phi = Array2::from_shape_fn((a, d), |_| rng.random_range(-2.0..2.0));
        let pen = PenaltyWeights { alpha1: 0.01, alpha2: 0.02, alpha3: 0.03 };
        let p = ModelParams::new(mode, ids("s", n), ids("a", a), w, phi, pen).unwrap();
        let batch: Vec<JudgmentRecord> = (0..6)
            .map(|_| {
                let mut s: Vec<usize> = (0..n).collect();
                s.shuffle(&mut rng);
                JudgmentRecord {
                    triplet: [s[0], s[1], s[2]].map(|i| format!("s{i}")),
                    odd_one_out: rng.random_range(0..3),
                    annotator_id: format!("a{}", rng.random_range(0..a.max(1))),
                    response_ms: None,
                    position_shown: None,
                }
            })
            .collect();
        let (dw, dphi) = gradients(&p, &batch, &pen, false).unwrap();
        let fd = |bump: &dyn Fn(&mut ModelParams, f64)| {
            let (mut hi, mut lo) = (p.clone(), p.clone());
            bump(&mut hi, h);
            bump(&mut lo, -h);
            (loss(&hi, &batch, &pen).unwrap() - loss(&lo, &batch, &pen).unwrap()) / (2.0 * h)
        };
        if mode != Mode::Cph {
            for ((r, c), &g) in dw.indexed_iter() {
                worst = worst.max(rel(g, fd(&|q, e| q.w[[r, c]] += e)));
            }
        }
        for ((r, c), &g) in dphi.indexed_iter() {
            worst = worst.max(rel(g, fd(&|q, e| q.phi[[r, c]] += e)));
        }
    }
    checked(worst <= 1e-6, format!("max rel err {worst:.1e} over 20 instances (limit 1e-6)"))
}

fn generative_fidelity() -> Outcome {
    let draws = 10_000usize;
    let mut worst_z: f64 = 0.0;
    for i in 0..10u64 {
        let mut cfg = WorldConfig::new(8, 3, 3, 0.3, 100 + i);
        cfg.value_scale = 2.0;
        cfg.populations = 1 + (i as usize % 2);
        cfg.population_separation = 0.6;
        cfg.mask_jitter = 0.1;
        let world = generate_world(&cfg).unwrap();
        let t = sample_triplets(&world.stimulus_ids, 1, i, &HashSet::new()).unwrap();
        let a = i as usize % 3;
        let js = sample_judgments(&world, &t, draws, &AnnotatorAssignment::Fixed(a), 500 + i).unwrap();
        let key = t[0].ids();
        let p = world.probabilities_for(&world.annotator_ids[a], key).unwrap();
        for (slot, id) in key.iter().enumerate() {
            let k = js.iter().filter(|j| &j.triplet[j.odd_one_out as usize] == id).count() as f64;
            let mean = draws as f64 * p[slot];
            let sd = (draws as f64 * p[slot] * (1.0 - p[slot])).sqrt();
            worst_z = worst_z.max((k - mean).abs() / sd);
        }
    }
    checked(worst_z <= 3.0, format!("max |z| {worst_z:.2} over 10 worlds x 3 outcomes (limit 3)"))
}

/// The heterogeneous world used by recovery, swap and mask separation.
struct Lab {
    world: SyntheticWorld,
    corpus: Corpus,
    held: Vec<JudgmentRecord>,
    /// Pruned conditional models, one per training seed.
    runs: Vec<ModelParams>,
    retained: Vec<usize>,
}

fn recovery_world(populations: usize, separation: f64) -> SyntheticWorld {
    let mut cfg = WorldConfig::new(60, 20, 6, 0.5, 1);
    cfg.value_scale = 3.0;
    cfg.populations = populations;
    cfg.population_separation = separation;
    cfg.mask_jitter = 0.05;
    generate_world(&cfg).unwrap()
}

fn train_pruned(world: &SyntheticWorld, seeds: &[u64]) -> (Corpus, Vec<ModelParams>, Vec<usize>) {
    let t = sample_triplets(&world.stimulus_ids, 30_000, 1, &HashSet::new()).unwrap();
    let js = sample_judgments(world, &t, 1, &AnnotatorAssignment::UniformRandom, 2).unwrap();
    let corpus = world.corpus(js);
    let (tr, va) = split(&corpus, 0.1, 1).unwrap();
    let mut runs = Vec::new();
    let mut retained = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig { mode: Mode::C, dims: 32, seed, ..Default::default() };
        let (p, _) = train(&tr, Some(&va), &cfg, None).unwrap();
        let pr = prune_dimensions(&p, &va.judgments, &default_threshold_grid()).unwrap();
        retained.push(pr.retained_dims.len());
        runs.push(p.with_dims_zeroed_except(&pr.retained_dims));
    }
    (corpus, runs, retained)
}

fn synthetic_recovery(lab: &mut Option<Lab>) -> Outcome {
    let world = recovery_world(2, 0.7);
    let (corpus, runs, retained) = train_pruned(&world, &[1, 2]);
    let ht = sample_triplets(&world.stimulus_ids, 20_000, 8, &HashSet::new()).unwrap();
    let held = sample_judgments(&world, &ht, 2, &AnnotatorAssignment::UniformRandom, 10).unwrap();
    let ceiling = oracle_ceiling_for_judgments(&world, &held).unwrap();
    let acc = accuracy(&runs[0], &held).unwrap();
    let m = match_dimensions(&runs[0], &runs[1]).unwrap();
    let median = median_match(&m).unwrap_or(f64::NAN);
    let dims_ok = retained.iter().all(|&k| (4..=8).contains(&k));
    let acc_ok = (acc - ceiling).abs() <= 0.02;
    let match_ok = median >= 0.8;
    let detail = format!(
        "retained {retained:?} (want 6+-2) {}; acc {acc:.4} vs ceiling {ceiling:.4} {}; cross-seed median r {median:.3} {}",
        mark(dims_ok),
        mark(acc_ok),
        mark(match_ok)
    );
    *lab = Some(Lab { world, corpus, held, runs, retained });
    checked(dims_ok && acc_ok && match_ok, detail)
}

fn mark(ok: bool) -> &'static str {
    if ok { "ok" } else { "MISS" }
}

fn mask_separation(lab: &Option<Lab>) -> Outcome {
    let Some(lab) = lab else { return Outcome::NotRun("needs the recovery world".into()) };
    let sep = mask_group_auc(&lab.runs[0], &lab.corpus, DemographicField::Ancestry, 1, 5, 3).unwrap();

    let world = recovery_world(1, 0.0);
    let (mut corpus, runs, _) = train_pruned(&world, &[1]);
    let mut labels: Vec<usize> = (0..corpus.annotators.len()).map(|i| i % 2).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    for (a, g) in corpus.annotators.iter_mut().zip(labels) {
        a.ancestry = Some(format!("pop{g}"));
    }
    let null = mask_group_auc(&runs[0], &corpus, DemographicField::Ancestry, 1, 5, 3).unwrap();
    let sep_ok = sep.auc.mean >= 0.9;
    let null_ok = null.auc.contains(0.5);
    checked(
        sep_ok && null_ok,
        format!(
            "separated auc {:.3} {}; shuffled ci [{:.3}, {:.3}] {}",
            sep.auc.mean,
            mark(sep_ok),
            null.auc.low,
            null.auc.high,
            mark(null_ok)
        ),
    )
}

fn swap_degradation(lab: &Option<Lab>) -> Outcome {
    let Some(lab) = lab else { return Outcome::NotRun("needs the recovery world".into()) };
    let r = annotator_swap_test(&lab.runs[0], &lab.held, 10, 5).unwrap();
    let drop = r.unswapped_accuracy - r.swapped.mean;
    checked(
        drop >= 0.03,
        format!(
            "{:.4} -> {:.4} +- {:.4} (drop {:.1} pts, limit 3; {} annotators, {} retained dims)",
            r.unswapped_accuracy,
            r.swapped.mean,
            r.swapped.half_width(),
            100.0 * drop,
            lab.world.annotator_ids.len(),
            lab.retained[0]
        ),
    )
}

fn disparity_auditing() -> Outcome {
    let m = 100;
    let mut scores = Vec::new();
    let mut subsets = Vec::new();
    for c in 0..=10 {
        let zeros = c * m / 10;
        let members: Vec<(String, bool)> = (0..m).map(|i| (format!("c{c}_{i}"), i >= zeros)).collect();
        scores.extend(members.iter().map(|(id, l)| (id.clone(), if *l { 1.0 } else { 0.0 })));
        subsets.push(SubsetSpec { members });
    }
    let r = disparity_estimate(&scores, &subsets, DEFAULT_DISPARITY_CAP).unwrap();
    let rho = r.spearman.unwrap_or(f64::NAN);
    let delta = r.ground_truth[r.selected];
    checked(
        (rho - 1.0).abs() <= 1e-12 && delta == 0.0,
        format!("spearman {rho:.6}; selected r = {:.1} with delta {delta}", subsets[r.selected].r()),
    )
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=50);
        // a coarse score grid forces ties
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (sp, _) in scores.iter().zip(&labels).filter(|x| *x.1) {
            for (sn, _) in scores.iter().zip(&labels).filter(|x| !*x.1) {
                pairs += 1.0;
                wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
            }
        }
        if binary_auc(&scores, &labels).unwrap() != wins / pairs {
            mismatches += 1;
        }
    }
    checked(mismatches == 0, format!("{mismatches} mismatches in 100 instances"))
}

fn snapshot(paths: &[PathBuf]) -> Vec<(PathBuf, Vec<u8>)> {
    let mut all = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<_> = std::fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            all.extend(snapshot(&entries));
        } else {
            all.push((p.clone(), std::fs::read(p).unwrap_or_default()));
        }
    }
    all
}

fn oddity(dir: &Path, args: &[&str]) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_oddity")).current_dir(dir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.success()
}

fn cli_determinism() -> Outcome {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let steps: &[(&[&str], &str)] = &[
        (&["synth", "world", "--stimuli", "24", "--annotators", "8", "--dims", "3", "--scale", "3", "--populations", "2", "--separation", "0.8", "--seed", "1", "--out", "world.json"], "world.json"),
        (&["synth", "judgments", "--world", "world.json", "--count", "1500", "--per-triplet", "2", "--seed", "2", "--out", "corpus"], "corpus"),
        (&["qc", "--corpus", "corpus", "--out", "clean"], "clean"),
        (&["sample-triplets", "--stimuli", "clean", "--count", "50", "--seed", "3", "--out", "pool.jsonl"], "pool.jsonl"),
        (&["train", "--train", "clean", "--mode", "c", "--dims", "6", "--epochs", "4", "--validation-fraction", "0.1", "--seed", "5", "--out", "c.ckpt"], "c.ckpt"),
        (&["prune", "--model", "c.ckpt", "--validation", "clean", "--out", "pruned.ckpt"], "pruned.ckpt"),
        (&["eval", "accuracy", "--model", "pruned.ckpt", "--corpus", "clean", "--out", "acc.json"], "acc.json"),
        (&["eval", "simmatrix", "--model", "c.ckpt", "--corpus", "clean", "--out", "sim"], "sim"),
        (&["eval", "swap", "--model", "c.ckpt", "--corpus", "clean", "--repeats", "5", "--out", "swap.json"], "swap.json"),
        (&["analyze", "masks-auc", "--model", "c.ckpt", "--corpus", "clean", "--folds", "2", "--out", "auc.json"], "auc.json"),
        (&["synth", "ceiling", "--world", "world.json", "--corpus", "clean", "--out", "ceiling.json"], "ceiling.json"),
    ];
    for (args, _) in steps {
        if !oddity(p, args) {
            return checked(false, format!("{} failed", args[..2].join(" ")));
        }
    }
    let outputs: Vec<PathBuf> = steps.iter().map(|(_, o)| p.join(o)).collect();
    let before = snapshot(&outputs);
    for (_, o) in steps {
        if !oddity(p, &["rerun", &format!("{o}.manifest.json")]) {
            return checked(false, format!("rerun of {o} failed"));
        }
    }
    let after = snapshot(&outputs);
    let differing: Vec<String> = before
        .iter()
        .zip(&after)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.strip_prefix(p).unwrap().display().to_string())
        .collect();
    checked(
        differing.is_empty() && before.len() == after.len(),
        format!("{} commands, {} files compared, differing: {differing:?}", steps.len(), before.len()),
    )
}

fn main() {
    let mut tally = Tally::default();
    let mut lab = None;
    tally.gate("gradient-correctness", secs(10), gradient_correctness);
    tally.gate("generative-fidelity", secs(30), generative_fidelity);
    tally.gate("synthetic-recovery", secs(300), || synthetic_recovery(&mut lab));
    tally.gate("mask-separation", secs(120), || mask_separation(&lab));
    tally.gate("swap-degradation", secs(120), || swap_degradation(&lab));
    tally.gate("real-data-reproduction", secs(0), || {
        Outcome::NotRun("the released AVFS judgments are not available here".into())
    });
    tally.gate("disparity-auditing", secs(10), disparity_auditing);
    tally.gate("auc-oracle-equivalence", secs(10), auc_oracle);
    tally.gate("cli-determinism", secs(300), cli_determinism);
    println!("{} passed, {} failed, {} not run", tally.passed, tally.failed, tally.skipped);
    let strict = std::env::var("ODDITY_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && tally.failed > 0 {
        std::process::exit(1);
    }
}
