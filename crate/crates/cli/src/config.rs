//! `key = value` config files and the flags > config > defaults merge.
//!
//! Bare keys apply to every command that has them; a key may be scoped to one
//! command either as `train.epochs = 10` or under a `[train]` (or
//! `[eval.swap]`) section header. Scoped entries beat bare ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use crate::spec::{self, CommandSpec, Kind};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    bare: BTreeMap<String, String>,
    /// Keyed by (section, key).
    scoped: BTreeMap<(String, String), String>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<ConfigFile> {
        let mut cfg = ConfigFile::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", i + 1);
            if let Some(s) = line.strip_prefix('[') {
                let s = s.strip_suffix(']').ok_or_else(|| anyhow!("{}: unterminated section header", at()))?.trim();
                if spec::find_section(s).is_none() {
                    bail!("{}: unknown section [{s}]", at());
                }
                section = Some(s.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{}: expected key = value", at()))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            let (scope, name) = match (&section, k.rsplit_once('.')) {
                (Some(s), _) => (Some(s.clone()), k),
                (None, Some((s, n))) => (Some(s.to_string()), n),
                (None, None) => (None, k),
            };
            match scope {
                Some(s) => {
                    let cmd = spec::find_section(&s).ok_or_else(|| anyhow!("{}: unknown command {s}", at()))?;
                    if cmd.key(name).is_none() {
                        bail!("{}: {} has no key {name}", at(), cmd.path);
                    }
                    cfg.scoped.insert((s, name.to_string()), v);
                }
                None => {
                    if !spec::known_anywhere(name) {
                        bail!("{}: unknown key {name}", at());
                    }
                    cfg.bare.insert(name.to_string(), v);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn lookup(&self, section: &str, key: &str) -> Option<&str> {
        self.scoped
            .get(&(section.to_string(), key.to_string()))
            .or_else(|| self.bare.get(key))
            .map(String::as_str)
    }
}

/// Fully resolved key values for one command.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: &'static CommandSpec,
    pub values: BTreeMap<String, String>,
}

impl Resolved {
    /// `flags` holds only keys given on the command line.
    pub fn merge(spec: &'static CommandSpec, flags: &BTreeMap<String, String>, config: &ConfigFile) -> Result<Resolved> {
        let section = spec.section();
        let mut values = BTreeMap::new();
        for k in spec.keys {
            let v = flags
                .get(k.name)
                .map(String::as_str)
                .or_else(|| config.lookup(&section, k.name))
                .or(k.default);
            match v {
                Some(v) => {
                    values.insert(k.name.to_string(), v.to_string());
                }
                None if k.required => bail!("{}: missing required --{}", spec.path, k.name),
                None => {}
            }
        }
        Ok(Resolved { spec, values })
    }

    pub fn from_values(spec: &'static CommandSpec, values: BTreeMap<String, String>) -> Result<Resolved> {
        if let Some(k) = values.keys().find(|k| spec.key(k).is_none()) {
            bail!("{} has no key {k}", spec.path);
        }
        Self::merge(spec, &values, &ConfigFile::default())
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        debug_assert!(self.spec.key(key).is_some(), "{key} not declared for {}", self.spec.path);
        self.values.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.opt(key).ok_or_else(|| anyhow!("missing --{key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.str(key)?;
        v.parse().map_err(|e| anyhow!("invalid value {v:?} for --{key}: {e}"))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key).map(|_| self.parse(key)).transpose()
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.str(key).map(PathBuf::from)
    }

    pub fn path_opt(&self, key: &str) -> Option<PathBuf> {
        self.opt(key).map(PathBuf::from)
    }

    /// Comma-separated list; empty items are dropped.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.opt(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect())
            .unwrap_or_default()
    }

    /// Values as recorded in a manifest, secrets redacted.
    pub fn recorded(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .map(|(k, v)| {
                let secret = self.spec.key(k).is_some_and(|s| s.kind == Kind::Secret);
                (k.clone(), if secret { "<redacted>".to_string() } else { v.clone() })
            })
            .collect()
    }

    pub fn paths_of(&self, kind: Kind) -> Vec<(String, Vec<PathBuf>)> {
        self.spec
            .keys
            .iter()
            .filter(|k| k.kind == kind)
            .filter_map(|k| self.opt(k.name).map(|_| (k.name.to_string(), self.list(k.name).into_iter().map(PathBuf::from).collect())))
            .collect()
    }
}
