//! Experiment harness: loads an [`ExperimentConfig`] and an LQ spec, runs the
//! named suite and writes `results.json`, CSV series and a hashed manifest.

pub mod config;
pub mod report;
pub mod suites;

use std::path::{Path, PathBuf};

use hybridmp::lq::LqSpec;
use hybridmp::model::{validate_spec, ValidationConfig, Violation};

pub use config::{ExperimentConfig, Suite};
pub use report::{Metric, Report, Results};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),

    #[error("spec {path}: {source}")]
    Spec { path: PathBuf, source: hybridmp::Error },

    #[error(transparent)]
    Run(#[from] hybridmp::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// 2 for configuration and spec problems, 1 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Spec { .. } => 2,
            Self::Run(hybridmp::Error::Config(_) | hybridmp::Error::Parse(_)) => 2,
            Self::Run(_) | Self::Io { .. } => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Spec { .. } => "spec",
            Self::Run(_) => "run",
            Self::Io { .. } => "io",
        }
    }
}

/// Reads and validates an LQ spec, including the sampled assumption checks.
pub fn load_spec(path: &Path) -> Result<LqSpec, HarnessError> {
    let spec_err = |source| HarnessError::Spec { path: path.to_path_buf(), source };
    let text = std::fs::read_to_string(path).map_err(|e| spec_err(e.into()))?;
    let lq = LqSpec::from_json(&text).map_err(spec_err)?;
    let violations = check_spec(&lq).map_err(spec_err)?;
    if let Some(v) = violations.first() {
        return Err(spec_err(hybridmp::Error::Config(format!("{:?}: {}", v.assumption, v.message))));
    }
    Ok(lq)
}

pub fn check_spec(lq: &LqSpec) -> hybridmp::Result<Vec<Violation>> {
    Ok(validate_spec(&lq.problem()?, &ValidationConfig::default()))
}

/// Loads the spec named by `cfg` and runs its suite.
pub fn run(cfg: &ExperimentConfig) -> Result<Report, HarnessError> {
    cfg.validate()?;
    let lq = load_spec(&cfg.spec)?;
    suites::run_suite(cfg, &lq)
}

/// Exit status of a finished run: 0 iff every metric passed.
pub fn exit_status(results: &Results) -> i32 {
    if results.pass {
        0
    } else {
        1
    }
}
