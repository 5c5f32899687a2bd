//! Run manifests: everything needed to repeat a command exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::spec::Kind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub key: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved values of every key, defaults included.
    pub config: BTreeMap<String, String>,
    pub seed: Option<String>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
}

impl RunManifest {
    pub fn for_run(r: &Resolved) -> Result<RunManifest> {
        let mut inputs = Vec::new();
        for (key, paths) in r.paths_of(Kind::Input) {
            for path in paths {
                let sha256 = hash_path(&path)?;
                inputs.push(InputHash { key: key.clone(), path, sha256 });
            }
        }
        Ok(RunManifest {
            command: r.spec.path.to_string(),
            config: r.recorded(),
            seed: r.values.get("seed").cloned(),
            inputs,
            outputs: r.paths_of(Kind::Output).into_iter().flat_map(|(_, p)| p).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Inputs whose current contents differ from the recorded hashes.
    pub fn changed_inputs(&self) -> Result<Vec<&InputHash>> {
        let mut changed = Vec::new();
        for i in &self.inputs {
            if hash_path(&i.path)? != i.sha256 {
                changed.push(i);
            }
        }
        Ok(changed)
    }
}

/// Default manifest location: beside the primary output.
pub fn default_path(r: &Resolved) -> Result<PathBuf> {
    let key = if r.spec.key("out").is_some() { "out" } else { "data-dir" };
    let out = r.path(key)?;
    if r.spec.path == "serve" {
        return Ok(out.join("serve.manifest.json"));
    }
    let name = out
        .file_name()
        .with_context(|| format!("--{key} {} has no file name", out.display()))?
        .to_string_lossy()
        .into_owned();
    Ok(out.with_file_name(format!("{name}.manifest.json")))
}

/// SHA-256 of a file, or of a directory's top-level regular files (their
/// names and contents, in name order).
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = std::fs::metadata(path).with_context(|| format!("input {} not found", path.display()))?;
    if meta.is_file() {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    if !meta.is_dir() {
        bail!("input {} is neither a file nor a directory", path.display());
    }
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for e in std::fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let e = e?;
        if e.file_type()?.is_file() {
            files.push((e.file_name().to_string_lossy().into_owned(), e.path()));
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for (name, p) in files {
        let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
