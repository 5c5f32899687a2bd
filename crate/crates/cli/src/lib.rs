//! The `oddity` command line: argument parsing, config resolution, run
//! manifests and the subcommand bodies.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod spec;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::ArgMatches;

use crate::config::{ConfigFile, Resolved};
use crate::manifest::RunManifest;
use crate::spec::Kind;

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match spec::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&matches) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn leaf(matches: &ArgMatches) -> (String, &ArgMatches) {
    let mut path = Vec::new();
    let mut m = matches;
    while let Some((name, sub)) = m.subcommand() {
        path.push(name.to_string());
        m = sub;
    }
    (path.join(" "), m)
}

fn dispatch(matches: &ArgMatches) -> Result<serde_json::Value> {
    let (path, m) = leaf(matches);
    if path == "rerun" {
        let file = PathBuf::from(m.get_one::<String>("manifest-file").expect("required"));
        return rerun(&file, m.get_flag("force"));
    }
    let spec = spec::find(&path).expect("parser and table agree");
    let mut flags = BTreeMap::new();
    for k in spec.keys {
        let v = match k.kind {
            Kind::Flag => m.get_flag(k.name).then(|| "true".to_string()),
            _ => m.get_one::<String>(k.name).cloned(),
        };
        if let Some(v) = v {
            flags.insert(k.name.to_string(), v);
        }
    }
    let config = match matches.get_one::<String>("config") {
        Some(p) => ConfigFile::load(Path::new(p))?,
        None => ConfigFile::default(),
    };
    let resolved = Resolved::merge(spec, &flags, &config)?;
    let manifest_path = match matches.get_one::<String>("manifest") {
        Some(p) => PathBuf::from(p),
        None => manifest::default_path(&resolved)?,
    };
    execute_and_record(&resolved, &manifest_path)
}

/// Hashes inputs, runs the command, then writes the manifest. Serve writes
/// its manifest before it starts listening.
pub fn execute_and_record(resolved: &Resolved, manifest_path: &Path) -> Result<serde_json::Value> {
    let m = RunManifest::for_run(resolved)?;
    if resolved.spec.path == "serve" {
        m.write(manifest_path)?;
        return commands::execute(resolved);
    }
    let summary = commands::execute(resolved)?;
    m.write(manifest_path)?;
    Ok(summary)
}

pub fn rerun(manifest_path: &Path, force: bool) -> Result<serde_json::Value> {
    let m = RunManifest::read(manifest_path)?;
    let Some(spec) = spec::find(&m.command) else { bail!("manifest names unknown command {:?}", m.command) };
    if m.config.values().any(|v| v == "<redacted>") {
        bail!("{} manifests hold redacted secrets and cannot be rerun", m.command);
    }
    if m.version != env!("CARGO_PKG_VERSION") {
        eprintln!("warning: manifest written by version {}, running {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    let changed = m.changed_inputs()?;
    if !changed.is_empty() && !force {
        let list: Vec<String> = changed.iter().map(|i| format!("--{} {}", i.key, i.path.display())).collect();
        bail!("inputs changed since the manifest was written: {}", list.join(", "));
    }
    let resolved = Resolved::from_values(spec, m.config.clone())?;
    execute_and_record(&resolved, manifest_path)
}
