use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Suite};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

/// A scalar metric checked against its tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub pass: bool,
}

impl Metric {
    pub fn at_most(value: f64, tolerance: f64) -> Self {
        Self { value, tolerance, comparison: Comparison::AtMost, pass: value <= tolerance }
    }

    pub fn at_least(value: f64, tolerance: f64) -> Self {
        Self { value, tolerance, comparison: Comparison::AtLeast, pass: value >= tolerance }
    }
}

/// Contents of `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub suite: Suite,
    pub seed: u64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub metrics: BTreeMap<String, Metric>,
    /// Informational scalars without a pass/fail judgement.
    pub values: BTreeMap<String, f64>,
    pub pass: bool,
}

impl Results {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            suite: cfg.suite,
            seed: cfg.seed,
            n_steps: cfg.n_steps,
            n_paths: cfg.n_paths,
            metrics: BTreeMap::new(),
            values: BTreeMap::new(),
            pass: true,
        }
    }

    pub fn metric(&mut self, name: &str, m: Metric) {
        self.pass &= m.pass;
        self.metrics.insert(name.to_string(), m);
    }

    pub fn value(&mut self, name: &str, v: f64) {
        self.values.insert(name.to_string(), v);
    }

    pub fn failed(&self) -> Vec<&str> {
        self.metrics.iter().filter(|(_, m)| !m.pass).map(|(k, _)| k.as_str()).collect()
    }
}

/// Everything a suite produces, held in memory until the run succeeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub results: Results,
    /// File name (relative to the output directory) and contents.
    pub files: Vec<(String, Vec<u8>)>,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { results: Results::new(cfg), files: Vec::new() }
    }

    pub fn file(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))
}

/// Writes `results.json`, the suite files and `manifest.json` listing both
/// with their hashes. Returns the written paths.
pub fn write_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut files = vec![("results.json".to_string(), to_json(&report.results)?)];
    files.extend(report.files.iter().cloned());
    let mut manifest = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        write(dir, name, bytes)?;
        manifest.push(ManifestEntry { path: name.clone(), bytes: bytes.len(), sha256: sha256_hex(bytes) });
    }
    write(dir, "manifest.json", &to_json(&manifest)?)?;
    Ok(files.iter().map(|(n, _)| dir.join(n)).chain([dir.join("manifest.json")]).collect())
}

#[derive(Debug, Serialize)]
struct ErrorDoc<'a> {
    kind: &'a str,
    message: String,
    exit_code: i32,
}

/// Writes `error.json` into `dir`, creating it if needed.
pub fn write_error(err: &HarnessError, dir: &Path) -> Result<PathBuf, HarnessError> {
    let doc = ErrorDoc { kind: err.kind(), message: err.to_string(), exit_code: err.exit_code() };
    write(dir, "error.json", &to_json(&doc)?)?;
    Ok(dir.join("error.json"))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, HarnessError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| HarnessError::Run(hybridmp::Error::from(e)))?;
    bytes.push(b'\n');
    Ok(bytes)
}
