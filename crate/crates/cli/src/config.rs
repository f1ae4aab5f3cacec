use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    FilterCheck,
    MpCheck,
    LqSolve,
    ConvergenceSweep,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::FilterCheck, Suite::MpCheck, Suite::LqSolve, Suite::ConvergenceSweep];

    pub fn name(self) -> &'static str {
        match self {
            Suite::FilterCheck => "filter-check",
            Suite::MpCheck => "mp-check",
            Suite::LqSolve => "lq-solve",
            Suite::ConvergenceSweep => "convergence-sweep",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown suite {s:?}")))
    }
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_sweep() -> Vec<usize> {
    vec![250, 500, 1000, 2000]
}

/// One experiment run, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// LQ problem spec; relative paths are resolved against the config file.
    pub spec: PathBuf,
    pub suite: Suite,
    pub n_steps: usize,
    pub n_paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Metric name to tolerance; replaces the suite default.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    /// Number of paths whose per-path CSVs are written.
    #[serde(default)]
    pub path_csvs: usize,
    /// Step counts of the convergence sweep.
    #[serde(default = "default_sweep")]
    pub sweep_steps: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without checking the invariants.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))
    }

    /// Reads `path` and resolves `spec` relative to its directory. The
    /// invariants are left to [`Self::validate`] so that overrides can be
    /// applied first.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.spec.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.spec = dir.join(&cfg.spec);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_steps < 10 {
            return Err(HarnessError::Config(format!("n_steps = {} is below 10", self.n_steps)));
        }
        if self.n_paths < 100 {
            return Err(HarnessError::Config(format!("n_paths = {} is below 100", self.n_paths)));
        }
        if let Some((name, tol)) = self.tolerances.iter().find(|(_, t)| !t.is_finite()) {
            return Err(HarnessError::Config(format!("tolerance {name} = {tol} is not finite")));
        }
        if self.suite == Suite::ConvergenceSweep {
            let top = self.sweep_steps.iter().copied().max().unwrap_or(0);
            if self.sweep_steps.is_empty() || self.sweep_steps.iter().any(|&n| n < 10 || top % n != 0) {
                return Err(HarnessError::Config(
                    "sweep_steps must be non-empty, at least 10 each, and divide the largest".into(),
                ));
            }
        }
        Ok(())
    }

    /// Applies `HYBRIDMP_*` overrides from `vars`: `SPEC`, `SUITE`, `N_STEPS`,
    /// `N_PATHS`, `SEED`, `OUT`, `PATH_CSVS`. Call [`Self::validate`] afterwards.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<(), HarnessError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
            v.parse().map_err(|_| HarnessError::Config(format!("{key}={v:?} is not valid")))
        }
        for (key, v) in vars {
            let Some(name) = key.strip_prefix("HYBRIDMP_") else { continue };
            match name {
                "SPEC" => self.spec = PathBuf::from(&v),
                "SUITE" => self.suite = v.parse()?,
                "N_STEPS" => self.n_steps = parse(&key, &v)?,
                "N_PATHS" => self.n_paths = parse(&key, &v)?,
                "SEED" => self.seed = parse(&key, &v)?,
                "OUT" => self.out = PathBuf::from(&v),
                "PATH_CSVS" => self.path_csvs = parse(&key, &v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn tolerance(&self, metric: &str, default: f64) -> f64 {
        self.tolerances.get(metric).copied().unwrap_or(default)
    }
}
