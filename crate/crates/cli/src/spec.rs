//! Declarative table of subcommands and their keys. The clap parser, the
//! config-file validation and the manifest all derive from it.

use clap::{Arg, ArgAction, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Value,
    /// Boolean switch; present means `true`.
    Flag,
    /// Path read by the command; hashed into the manifest. Comma-separated
    /// lists are allowed where noted.
    Input,
    Output,
    /// Recorded in the manifest as redacted.
    Secret,
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: Option<&'static str>,
    pub required: bool,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: Option<&'static str>, required: bool, help: &'static str) -> Key {
    Key { name, kind, default, required, help }
}
const fn val(name: &'static str, default: &'static str, help: &'static str) -> Key {
    key(name, Kind::Value, Some(default), false, help)
}
const fn opt(name: &'static str, help: &'static str) -> Key {
    key(name, Kind::Value, None, false, help)
}
const fn req(name: &'static str, help: &'static str) -> Key {
    key(name, Kind::Value, None, true, help)
}
const fn flag(name: &'static str, help: &'static str) -> Key {
    key(name, Kind::Flag, Some("false"), false, help)
}
const fn input(name: &'static str, help: &'static str) -> Key {
    key(name, Kind::Input, None, true, help)
}
const fn maybe_input(name: &'static str, help: &'static str) -> Key {
    key(name, Kind::Input, None, false, help)
}
const fn output(name: &'static str, help: &'static str) -> Key {
    key(name, Kind::Output, None, true, help)
}
const fn maybe_output(name: &'static str, help: &'static str) -> Key {
    key(name, Kind::Output, None, false, help)
}

#[derive(Debug, Clone, Copy)]
pub struct CommandSpec {
    /// Space-separated subcommand path, e.g. `eval swap`.
    pub path: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
}

impl CommandSpec {
    pub fn key(&self, name: &str) -> Option<&Key> {
        self.keys.iter().find(|k| k.name == name)
    }

    /// Config-file section name: the path joined with dots.
    pub fn section(&self) -> String {
        self.path.replace(' ', ".")
    }
}

const MODEL: Key = input("model", "Model checkpoint");
const CORPUS: Key = input("corpus", "Corpus directory");
const OUT_JSON: Key = output("out", "Output JSON report");
const SEED: Key = val("seed", "0", "Random seed");
const POLICY: Key = val("policy", "judges", "Mask used to score triplets: judges, unconditional or an annotator id");

pub const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        path: "ingest",
        about: "Validate raw JSONL files and write a canonical corpus directory",
        keys: &[
            input("stimuli", "stimuli.jsonl"),
            input("annotators", "annotators.jsonl"),
            input("judgments", "judgments.jsonl"),
            maybe_input("ratings", "Optional ratings.jsonl"),
            maybe_input("labels", "Optional labels.jsonl"),
            output("out", "Corpus directory to write"),
        ],
    },
    CommandSpec {
        path: "qc",
        about: "Apply quality-control exclusion policies to a corpus",
        keys: &[
            CORPUS,
            maybe_input("policies", "JSON list of policies (defaults: fast_1, fast_2, deterministic, incomplete)"),
            output("out", "Filtered corpus directory; exclusions.json is written inside"),
        ],
    },
    CommandSpec {
        path: "sample-triplets",
        about: "Draw distinct triplets uniformly at random",
        keys: &[
            input("stimuli", "stimuli.jsonl or a corpus directory"),
            opt("count", "Number of triplets"),
            flag("all", "Enumerate every triplet instead of sampling"),
            maybe_input("exclude", "Triplets file whose entries must not be drawn"),
            SEED,
            output("out", "Triplets JSONL"),
        ],
    },
    CommandSpec {
        path: "train",
        about: "Fit an embedding (mode u, c or cph)",
        keys: &[
            input("train", "Training corpus directory"),
            maybe_input("validation", "Validation corpus directory"),
            val("validation-fraction", "0", "Hold out this fraction of --train when no --validation is given"),
            val("mode", "u", "u (unconditional), c (conditional) or cph (post-hoc masks, needs --warm-start)"),
            val("dims", "128", "Embedding dimensions"),
            val("epochs", "40", "Training epochs"),
            val("batch-size", "128", "Mini-batch size"),
            val("lr", "0.001", "Adam learning rate"),
            val("alpha1", "0.00005", "Sparsity penalty weight"),
            val("alpha2", "0.01", "Negativity penalty weight"),
            val("alpha3", "0.00001", "Mask-logit L2 penalty weight"),
            val("init-scale", "0.1", "Initial embedding entries are drawn from U[0, init-scale]"),
            flag("freeze-embeddings", "Keep embeddings fixed"),
            SEED,
            maybe_input("warm-start", "Checkpoint to initialise from"),
            output("out", "Checkpoint to write"),
            maybe_output("history", "Per-epoch CSV"),
        ],
    },
    CommandSpec {
        path: "prune",
        about: "Drop dimensions below the validation-selected threshold",
        keys: &[
            MODEL,
            input("validation", "Validation corpus directory"),
            opt("thresholds", "Comma-separated threshold grid (default: 21 log-spaced values from 1e-6 to 1e-1)"),
            output("out", "Pruned checkpoint"),
            maybe_output("report", "Per-threshold CSV"),
        ],
    },
    CommandSpec {
        path: "eval accuracy",
        about: "Odd-one-out accuracy and mean negative log-likelihood",
        keys: &[MODEL, CORPUS, OUT_JSON],
    },
    CommandSpec {
        path: "eval entropy",
        about: "Spearman correlation of human and model per-triplet entropies",
        keys: &[MODEL, CORPUS, POLICY, OUT_JSON],
    },
    CommandSpec {
        path: "eval simmatrix",
        about: "Human and model similarity matrices and their correlation",
        keys: &[MODEL, CORPUS, POLICY, output("out", "Directory for model.csv, human.csv and report.json")],
    },
    CommandSpec {
        path: "eval elimination",
        about: "Accuracy as the smallest entries of each embedding are removed",
        keys: &[
            MODEL,
            CORPUS,
            maybe_input("votes", "Corpus with repeated judgments for variance explained"),
            output("out", "Curve CSV"),
        ],
    },
    CommandSpec {
        path: "eval swap",
        about: "Accuracy after randomly reassigning annotators to judgments",
        keys: &[MODEL, CORPUS, val("repeats", "100", "Permutations"), SEED, OUT_JSON],
    },
    CommandSpec {
        path: "eval bayes",
        about: "Bayes-optimal accuracy from the vote table",
        keys: &[CORPUS, OUT_JSON],
    },
    CommandSpec {
        path: "analyze masks-auc",
        about: "Cross-validated AUC separating two annotator groups by mask",
        keys: &[
            MODEL,
            CORPUS,
            val("field", "ancestry", "Demographic field"),
            val("min-judgments", "1", "Minimum judgments per annotator"),
            val("folds", "5", "Cross-validation folds"),
            SEED,
            OUT_JSON,
        ],
    },
    CommandSpec {
        path: "analyze grid",
        about: "Build the 100-column percentile grid for one dimension",
        keys: &[MODEL, req("dim", "Dimension index"), output("out", "Grid JSON")],
    },
    CommandSpec {
        path: "analyze human-embed",
        about: "Probe vectors from grid ratings",
        keys: &[
            input("ratings", "ratings.jsonl or a corpus directory"),
            input("grids", "Comma-separated grid JSON files, one per component"),
            output("out", "CSV with one row per probe"),
        ],
    },
    CommandSpec {
        path: "analyze disparity",
        about: "Rank subsets by estimated disparity",
        keys: &[
            input("scores", "CSV with header stimulus_id,value"),
            input("subsets", "JSON list of {members: [[stimulus_id, label], ...]}"),
            val("cap", "1000000", "Upper bound on the pairwise kernel"),
            OUT_JSON,
        ],
    },
    CommandSpec {
        path: "analyze external-corr",
        about: "Spearman correlation of one dimension with external ratings",
        keys: &[MODEL, req("dim", "Dimension index"), input("ratings", "CSV with header stimulus_id,value"), OUT_JSON],
    },
    CommandSpec {
        path: "analyze binary-auc",
        about: "ROC AUC of scores against binary labels",
        keys: &[input("scores", "CSV with header score,label (label 0/1 or false/true)"), OUT_JSON],
    },
    CommandSpec {
        path: "synth world",
        about: "Generate a ground-truth world",
        keys: &[
            val("stimuli", "60", "Stimuli"),
            val("annotators", "20", "Annotators"),
            val("dims", "6", "True dimensions"),
            val("sparsity", "0.5", "Fraction of zero embedding entries"),
            val("scale", "1", "Scale of nonzero embedding entries"),
            val("populations", "1", "Annotator populations"),
            val("separation", "0", "Mask separation between populations, in [0, 1]"),
            val("jitter", "0", "Per-annotator mask noise"),
            SEED,
            output("out", "World JSON"),
        ],
    },
    CommandSpec {
        path: "synth judgments",
        about: "Sample judgments from a world",
        keys: &[
            input("world", "World JSON"),
            maybe_input("triplets", "Triplets file (otherwise --count are drawn)"),
            val("count", "1000", "Triplets to draw when no --triplets are given"),
            val("per-triplet", "1", "Judgments per triplet"),
            val("assignment", "round_robin", "round_robin, uniform or fixed:<annotator row>"),
            SEED,
            output("out", "Corpus directory"),
        ],
    },
    CommandSpec {
        path: "synth ceiling",
        about: "Oracle accuracy of the true model on a corpus",
        keys: &[input("world", "World JSON"), CORPUS, OUT_JSON],
    },
    CommandSpec {
        path: "serve",
        about: "Run the collection service",
        keys: &[
            output("data-dir", "Campaign directory (event log, snapshots, exports)"),
            input("stimuli", "stimuli.jsonl or a corpus directory"),
            input("triplets", "Triplet pool"),
            val("judgments-per-triplet", "1", "Target judgments per triplet"),
            maybe_input("grids", "Comma-separated grid JSON files"),
            opt("probes", "Comma-separated probe stimulus ids for grid rating"),
            val("ratings-per-probe", "1", "Target ratings per grid and probe"),
            val("labels-per-grid", "1", "Target label sets per grid"),
            opt("image-dir", "Directory holding stimulus images by source_ref"),
            key("admin-token", Kind::Secret, None, true, "Token for /api/admin endpoints"),
            val("addr", "127.0.0.1:8080", "Listen address"),
            val("snapshot-every", "1000", "Events between snapshots (0 disables)"),
            maybe_input("policies", "JSON list of QC policies for exports"),
        ],
    },
    CommandSpec {
        path: "export",
        about: "Export a campaign's records offline",
        keys: &[
            input("data-dir", "Campaign directory written by serve"),
            flag("qc", "Apply the campaign's QC policies"),
            maybe_input("policies", "Override the QC policies"),
            output("out", "Corpus directory"),
        ],
    },
];

pub fn find(path: &str) -> Option<&'static CommandSpec> {
    COMMANDS.iter().find(|c| c.path == path)
}

pub fn find_section(section: &str) -> Option<&'static CommandSpec> {
    COMMANDS.iter().find(|c| c.section() == section)
}

pub fn known_anywhere(name: &str) -> bool {
    COMMANDS.iter().any(|c| c.key(name).is_some())
}

fn leaf(spec: &CommandSpec, name: &'static str) -> Command {
    let mut cmd = Command::new(name).about(spec.about);
    for k in spec.keys {
        let mut help = k.help.to_string();
        if let Some(d) = k.default {
            if k.kind != Kind::Flag {
                help.push_str(&format!(" [default: {d}]"));
            }
        }
        if k.required {
            help.push_str(" (required)");
        }
        let arg = Arg::new(k.name).long(k.name).help(help);
        cmd = cmd.arg(match k.kind {
            Kind::Flag => arg.action(ArgAction::SetTrue),
            _ => arg.action(ArgAction::Set),
        });
    }
    cmd
}

pub fn command() -> Command {
    let mut root = Command::new("oddity")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Odd-one-out similarity modelling: ingest, train, evaluate, analyse and collect")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value config file; flags override it"),
        )
        .arg(
            Arg::new("manifest")
                .long("manifest")
                .global(true)
                .value_name("FILE")
                .help("Where to write the run manifest [default: <out>.manifest.json]"),
        );
    let mut groups: Vec<(&'static str, Command)> = Vec::new();
    for spec in COMMANDS {
        match spec.path.split_once(' ') {
            None => root = root.subcommand(leaf(spec, spec.path)),
            Some((group, name)) => {
                let sub = leaf(spec, name);
                match groups.iter_mut().find(|(g, _)| *g == group) {
                    Some((_, cmd)) => *cmd = cmd.clone().subcommand(sub),
                    None => groups.push((group, Command::new(group).subcommand_required(true).subcommand(sub))),
                }
            }
        }
    }
    for (name, cmd) in groups {
        let about = match name {
            "eval" => "Evaluate a model against judgments",
            "analyze" => "Interpretability and auditing analyses",
            _ => "Synthetic worlds and judgments",
        };
        root = root.subcommand(cmd.about(about));
    }
    root.subcommand(
        Command::new("rerun")
            .about("Re-execute a run manifest, checking input hashes")
            .arg(Arg::new("manifest-file").required(true).value_name("MANIFEST"))
            .arg(
                Arg::new("force")
                    .long("force")
                    .action(ArgAction::SetTrue)
                    .help("Run even if inputs no longer match their recorded hashes"),
            ),
    )
}
