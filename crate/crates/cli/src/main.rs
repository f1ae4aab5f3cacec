use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybridmp::lq::LqSpec;
use hybridmp_cli::report::{write_error, write_report};
use hybridmp_cli::{check_spec, exit_status, run, ExperimentConfig, HarnessError};
use log::{error, info};

#[derive(Debug, Parser)]
#[command(name = "hybridmp", version, about = "Experiment harness for partially observed regime-switching control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the suite named in an experiment config.
    Run {
        #[arg(long, env = "HYBRIDMP_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "HYBRIDMP_SEED")]
        seed: Option<u64>,
        /// Worker threads; 0 uses every core.
        #[arg(long, env = "HYBRIDMP_WORKERS", default_value_t = 0)]
        workers: usize,
        #[arg(long, env = "HYBRIDMP_OUT")]
        out: Option<PathBuf>,
    },
    /// Check an LQ spec against the standing assumptions.
    Validate {
        #[arg(long, env = "HYBRIDMP_SPEC")]
        spec: PathBuf,
    },
}

fn run_command(config: PathBuf, seed: Option<u64>, workers: usize, out: Option<PathBuf>) -> i32 {
    let fallback_out = out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let fail = |err: HarnessError, dir: &PathBuf| {
        error!("{err}");
        if let Err(e) = write_error(&err, dir) {
            error!("could not write error.json: {e}");
        }
        err.exit_code()
    };
    let mut cfg = match ExperimentConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return fail(e, &fallback_out),
    };
    let env = cfg.apply_env(std::env::vars());
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    if let Err(e) = env {
        return fail(e, &cfg.out);
    }
    if let Err(e) = cfg.validate() {
        return fail(e, &cfg.out);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => return fail(HarnessError::Config(format!("worker pool: {e}")), &cfg.out),
    };
    let report = match pool.install(|| run(&cfg)) {
        Ok(r) => r,
        Err(e) => return fail(e, &cfg.out),
    };
    if let Err(e) = write_report(&report, &cfg.out) {
        return fail(e, &cfg.out);
    }
    let failed = report.results.failed();
    if failed.is_empty() {
        info!("all {} metrics passed; results in {}", report.results.metrics.len(), cfg.out.display());
    } else {
        error!("failed metrics: {}", failed.join(", "));
    }
    exit_status(&report.results)
}

fn validate_command(path: PathBuf) -> i32 {
    let checked = std::fs::read_to_string(&path)
        .map_err(hybridmp::Error::from)
        .and_then(|text| LqSpec::from_json(&text))
        .and_then(|lq| check_spec(&lq));
    match checked {
        Ok(violations) => {
            let doc = serde_json::json!({ "spec": path, "valid": violations.is_empty(), "violations": violations });
            println!("{}", serde_json::to_string_pretty(&doc).expect("serialisable"));
            if violations.is_empty() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let err = HarnessError::Spec { path, source: e };
            let doc =
                serde_json::json!({ "kind": err.kind(), "message": err.to_string(), "exit_code": err.exit_code() });
            println!("{}", serde_json::to_string_pretty(&doc).expect("serialisable"));
            err.exit_code()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, seed, workers, out } => run_command(config, seed, workers, out),
        Command::Validate { spec } => validate_command(spec),
    };
    ExitCode::from(code as u8)
}
