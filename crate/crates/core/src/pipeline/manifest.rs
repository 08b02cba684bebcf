use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::align::GateReport;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const MANIFEST_SUFFIX: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantGate {
    pub participant: String,
    pub report: GateReport,
}

/// Record of one stage invocation. Artifact paths are relative to the
/// output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<String>,
    pub gate_reports: Vec<ParticipantGate>,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(stage: &str, config: &ExperimentConfig) -> Self {
        Self {
            stage: stage.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            artifacts: Vec::new(),
            gate_reports: Vec::new(),
            warnings: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    /// Writes the manifest to `root/rel` after checking that every artifact
    /// exists.
    pub fn write(&self, root: &Path, rel: &str) -> Result<PathBuf> {
        if !rel.ends_with(MANIFEST_SUFFIX) {
            return Err(Error::contract(format!("manifest path {rel} must end with {MANIFEST_SUFFIX}")));
        }
        for a in &self.artifacts {
            if !root.join(a).is_file() {
                return Err(Error::contract(format!("manifest {rel} lists missing artifact {a}")));
            }
        }
        let path = root.join(rel);
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Files under `root` that are not listed by exactly one manifest, and
/// manifest entries pointing at missing files.
pub fn orphaned_files(root: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut others = Vec::new();
    for f in &files {
        let rel = relative(root, f);
        if rel.ends_with(MANIFEST_SUFFIX) {
            for a in RunManifest::load(f)?.artifacts {
                *counts.entry(a).or_default() += 1;
            }
        } else {
            others.push(rel);
        }
    }
    let mut bad: Vec<String> = others.iter().filter(|f| counts.get(*f) != Some(&1)).cloned().collect();
    bad.extend(counts.keys().filter(|k| !others.contains(k)).cloned());
    bad.sort();
    Ok(bad)
}
