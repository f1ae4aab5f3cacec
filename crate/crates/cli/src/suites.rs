//! The experiment suites. Each one computes its metrics and files in memory;
//! nothing is written until the whole suite has succeeded.

use hybridmp::adjoint::{
    cost_change, gateaux_check, solve_adjoint_bsde, stationarity_residual, BsdeConfig, CompactCoeffs, Direction,
    ResidualReport,
};
use hybridmp::lq::{full_observation_baseline, solve_lq, LqSpec, PicardConfig};
use hybridmp::model::{ControlDomain, FeedbackPolicy, ProblemSpec};
use hybridmp::pathsim::{par_paths, path_cost, PathNoise, TimeGrid};
use hybridmp::stats::{Accumulator, Estimate};
use hybridmp::wonham::{
    coupled_forward_noise, discrete_bayes_oracle, path_transformed_cost, Ensemble, FilterConfig, ObservedPath,
};
use log::info;

use crate::config::{ExperimentConfig, Suite};
use crate::report::{to_json, Metric, Report};
use crate::HarnessError;

type Result<T> = std::result::Result<T, HarnessError>;

/// Control used by the filter and maximum-principle suites: `u = -x`.
pub fn harness_policy() -> FeedbackPolicy {
    FeedbackPolicy::linear(ControlDomain::REAL_LINE, 1.0)
}

const GATEAUX_EPS: f64 = 1e-2;
const DIRECTION_AMPLITUDE: f64 = 0.25;

pub fn run_suite(cfg: &ExperimentConfig, lq: &LqSpec) -> Result<Report> {
    info!("suite {} with {} paths, {} steps, seed {}", cfg.suite, cfg.n_paths, cfg.n_steps, cfg.seed);
    match cfg.suite {
        Suite::FilterCheck => filter_check(cfg, lq),
        Suite::MpCheck => mp_check(cfg, lq),
        Suite::LqSolve => lq_solve(cfg, lq),
        Suite::ConvergenceSweep => convergence_sweep(cfg, lq),
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> hybridmp::Result<()>) -> hybridmp::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Sup over nodes of `|V(1_1) / V(1) - pi|`.
fn ks_zakai_gap(p: &ObservedPath) -> f64 {
    let Some(v) = p.filter.zakai.as_ref() else { return f64::NAN };
    (0..p.filter.grid.n_nodes())
        .map(|k| {
            let r = v.row(k);
            (r[0] / r.iter().sum::<f64>() - p.filter.pi(k)).abs()
        })
        .fold(0.0, f64::max)
}

/// Mean squared gap between the filter and the discrete-time oracle over nodes.
fn oracle_mse(p: &ObservedPath, spec: &ProblemSpec) -> hybridmp::Result<f64> {
    let oracle = discrete_bayes_oracle(&p.bundle, spec)?;
    let n = p.filter.grid.n_nodes();
    Ok((0..n).map(|k| (p.filter.pi(k) - oracle.row(k)[0]).powi(2)).sum::<f64>() / n as f64)
}

fn marginal(lq: &LqSpec, t: f64) -> f64 {
    let s = lq.lambda1 + lq.lambda2;
    if s == 0.0 {
        return lq.pi0;
    }
    let stationary = lq.lambda2 / s;
    stationary + (lq.pi0 - stationary) * (-s * t).exp()
}

struct FilterRow {
    pi: Vec<f64>,
    qv_error: f64,
    lag1: f64,
    excursions: usize,
    gap: f64,
    gap_coarse: f64,
    mse: f64,
    mse_coarse: f64,
    files: Vec<(String, Vec<u8>)>,
}

fn filter_check(cfg: &ExperimentConfig, lq: &LqSpec) -> Result<Report> {
    if !cfg.n_steps.is_multiple_of(2) {
        return Err(HarnessError::Config("filter-check compares n_steps with n_steps / 2 and needs it even".into()));
    }
    let spec = lq.problem()?;
    let grid = TimeGrid::new(lq.horizon, cfg.n_steps)?;
    let policy = harness_policy();
    let times: Vec<f64> = [0.25, 0.5, 1.0].iter().map(|f| f * lq.horizon).collect();
    let nodes: Vec<usize> = times.iter().map(|&t| grid.nearest(t)).collect();
    let fcfg = FilterConfig::default();
    let rows = par_paths(cfg.n_paths, |j| {
        let noise = PathNoise::draw(&spec, &grid, cfg.seed, j)?;
        let p = coupled_forward_noise(&spec, &policy, &noise, &fcfg, true)?;
        let coarse = coupled_forward_noise(&spec, &policy, &noise.coarsen(2)?, &fcfg, true)?;
        let nu = &p.filter.nu;
        let qv: f64 = nu.iter().map(|v| v * v).sum();
        let lag: f64 = nu.windows(2).map(|w| w[0] * w[1]).sum();
        let mut files = Vec::new();
        if (j as usize) < cfg.path_csvs {
            files.push((format!("paths/path_{j}.csv"), csv_bytes(|b| p.bundle.write_csv(b))?));
            files.push((format!("paths/filter_{j}.csv"), csv_bytes(|b| p.filter.write_csv(b))?));
        }
        Ok(FilterRow {
            pi: nodes.iter().map(|&k| p.filter.pi(k)).collect(),
            qv_error: (qv - lq.horizon).abs() / lq.horizon,
            lag1: if qv > 0.0 { lag / qv } else { 0.0 },
            excursions: p.filter.excursions_beyond(1e-4),
            gap: ks_zakai_gap(&p),
            gap_coarse: ks_zakai_gap(&coarse),
            mse: oracle_mse(&p, &spec)?,
            mse_coarse: oracle_mse(&coarse, &spec)?,
            files,
        })
    })?;

    let mut report = Report::new(cfg);
    let n = rows.len() as f64;
    let r = &mut report.results;
    let excursion_fraction = rows.iter().map(|r| r.excursions).sum::<usize>() as f64 / (n * grid.n_steps() as f64);
    r.metric("excursion_fraction", Metric::at_most(excursion_fraction, cfg.tolerance("excursion_fraction", 1e-3)));

    let mut tower_z: f64 = 0.0;
    for (c, &t) in times.iter().enumerate() {
        let est = Estimate::from_samples(&rows.iter().map(|r| r.pi[c]).collect::<Vec<_>>());
        let exact = marginal(lq, grid.node(nodes[c]));
        let z = if est.std_error > 0.0 {
            (est.mean - exact).abs() / est.std_error
        } else if est.mean == exact {
            0.0
        } else {
            f64::INFINITY
        };
        tower_z = tower_z.max(z);
        r.value(&format!("mean_pi_t{t}"), est.mean);
        r.value(&format!("marginal_t{t}"), exact);
    }
    r.metric("tower_property_z", Metric::at_most(tower_z, cfg.tolerance("tower_property_z", 3.0)));

    let qv = rows.iter().map(|r| r.qv_error).sum::<f64>() / n;
    r.metric("qv_error", Metric::at_most(qv, cfg.tolerance("qv_error", 0.05)));
    let lag: Accumulator = rows.iter().map(|r| r.lag1).collect();
    let lag_z = if lag.std_error() > 0.0 { lag.mean().abs() / lag.std_error() } else { 0.0 };
    r.metric("innovation_lag1_z", Metric::at_most(lag_z, cfg.tolerance("innovation_lag1_z", 3.0)));

    let gap = rows.iter().map(|r| r.gap).sum::<f64>() / n;
    let gap_coarse = rows.iter().map(|r| r.gap_coarse).sum::<f64>() / n;
    let ratio = cfg.tolerance("ks_zakai_ratio", 1.2);
    r.metric("ks_zakai_sup_gap", Metric::at_most(gap, cfg.tolerance("ks_zakai_sup_gap", gap_coarse / ratio)));
    r.value("ks_zakai_sup_gap_half_steps", gap_coarse);

    let rmse = (rows.iter().map(|r| r.mse).sum::<f64>() / n).sqrt();
    let rmse_coarse = (rows.iter().map(|r| r.mse_coarse).sum::<f64>() / n).sqrt();
    let rmse_ratio = if rmse_coarse > 0.0 { rmse / rmse_coarse } else { 0.0 };
    r.metric("oracle_rmse_ratio", Metric::at_most(rmse_ratio, cfg.tolerance("oracle_rmse_ratio", 1.0)));
    r.value("oracle_rmse", rmse);
    r.value("oracle_rmse_half_steps", rmse_coarse);

    for row in rows {
        report.files.extend(row.files);
    }
    Ok(report)
}

fn mp_check(cfg: &ExperimentConfig, lq: &LqSpec) -> Result<Report> {
    let spec = lq.problem()?;
    let cc = CompactCoeffs::build(&spec)?;
    let grid = TimeGrid::new(lq.horizon, cfg.n_steps)?;
    let ens = Ensemble::simulate(&spec, &harness_policy(), &grid, cfg.n_paths, cfg.seed)?;
    let mut report = Report::new(cfg);
    let r = &mut report.results;

    let diffs: Vec<f64> =
        ens.paths.iter().map(|p| path_cost(&spec, &p.bundle) - path_transformed_cost(&spec, p)).collect();
    let d = Estimate::from_samples(&diffs);
    let z = if d.std_error > 0.0 { d.mean.abs() / d.std_error } else { 0.0 };
    r.metric("cost_equivalence_z", Metric::at_most(z, cfg.tolerance("cost_equivalence_z", 3.0)));

    for (i, dir) in Direction::standard_set(DIRECTION_AMPLITUDE).iter().enumerate() {
        let g = gateaux_check(&cc, &ens, dir, GATEAUX_EPS)?;
        let name = format!("gateaux_gap_{}", i + 1);
        let tol = cfg.tolerance(&name, 3.0 * g.std_error + 0.1 * GATEAUX_EPS);
        r.metric(&name, Metric::at_most(g.gap(), tol));
        r.value(&format!("gateaux_first_order_{}", i + 1), g.first_order);
    }

    let adjoint = solve_adjoint_bsde(&cc, &ens, &BsdeConfig::default())?;
    let stationarity = stationarity_residual(&cc, &ens, &adjoint)?;
    let residual = ResidualReport::new(&stationarity, &adjoint);
    r.value("stationarity_residual", residual.residual);
    r.value("bsde_min_r2", residual.per_step_r2_min);
    report.file("residual_report.json", to_json(&residual)?);
    for j in 0..cfg.path_csvs.min(ens.len()) {
        let path = adjoint.path(j)?;
        report.file(format!("paths/adjoint_{j}.csv"), csv_bytes(|b| path.write_csv(b))?);
    }
    Ok(report)
}

fn lq_solve(cfg: &ExperimentConfig, lq: &LqSpec) -> Result<Report> {
    let grid = TimeGrid::new(lq.horizon, cfg.n_steps)?;
    let picard = PicardConfig { seed: cfg.seed, ..PicardConfig::default() };
    let sol = solve_lq(lq, &grid, cfg.n_paths, &picard)?;
    info!("Picard loop stopped after {} iterations (converged: {})", sol.trace.len(), sol.converged);
    let cc = CompactCoeffs::build(&lq.problem()?)?;
    let mut slack = f64::INFINITY;
    for dir in Direction::standard_set(DIRECTION_AMPLITUDE) {
        for eps in [GATEAUX_EPS, -GATEAUX_EPS] {
            let d = cost_change(&cc, &sol.ensemble, &dir, eps)?;
            slack = slack.min(d.mean + 3.0 * d.std_error + 10.0 * eps * eps);
        }
    }
    let baseline = full_observation_baseline(lq, &grid, cfg.n_paths, cfg.seed)?;

    let mut report = Report::new(cfg);
    let r = &mut report.results;
    r.metric("converged", Metric::at_least(if sol.converged { 1.0 } else { 0.0 }, 1.0));
    r.metric(
        "stationarity_residual",
        Metric::at_most(sol.stationarity.residual, cfg.tolerance("stationarity_residual", 1e-2 * sol.residual_at_zero)),
    );
    r.metric(
        "refit_residual",
        Metric::at_most(sol.refit_max_residual, cfg.tolerance("refit_residual", 0.05 * sol.control_scale)),
    );
    r.metric("local_optimality_slack", Metric::at_least(slack, cfg.tolerance("local_optimality_slack", 0.0)));
    r.metric(
        "information_gap",
        Metric::at_most(baseline.cost.mean - sol.cost.mean, cfg.tolerance("information_gap", 3.0 * sol.cost.std_error)),
    );
    r.value("cost_mean", sol.cost.mean);
    r.value("cost_se", sol.cost.std_error);
    r.value("baseline_cost_mean", baseline.cost.mean);
    r.value("baseline_cost_se", baseline.cost.std_error);
    r.value("residual_at_zero", sol.residual_at_zero);
    r.value("formula_gap", sol.formula_gap);
    r.value("iterations", sol.trace.len() as f64);

    report.file("trace.csv", csv_bytes(|b| sol.write_trace_csv(b))?);
    let xs: Vec<f64> = sol.ensemble.paths.iter().map(|p| p.bundle.x[0]).collect();
    let spread = 2.0 * lq.sigma * lq.horizon.sqrt() + xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let times = [0.0, 0.5 * lq.horizon, lq.horizon];
    report.file("control_surface.csv", csv_bytes(|b| sol.write_control_surface_csv(b, &times, (-spread, spread), 21))?);
    report.file("residual_report.json", to_json(&ResidualReport::new(&sol.stationarity, &sol.adjoint))?);
    for j in 0..cfg.path_csvs.min(sol.ensemble.len()) {
        let path = sol.adjoint.path(j)?;
        report.file(format!("paths/adjoint_{j}.csv"), csv_bytes(|b| path.write_csv(b))?);
    }
    Ok(report)
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub n_steps: usize,
    pub oracle_rmse: f64,
    pub cost_mean: f64,
    pub cost_se: f64,
}

/// Filter error and cost at each step count, on paths whose noise is drawn on
/// the finest grid and aggregated to the coarser ones.
pub fn sweep_table(cfg: &ExperimentConfig, lq: &LqSpec) -> Result<Vec<SweepRow>> {
    let spec = lq.problem()?;
    let mut steps = cfg.sweep_steps.clone();
    steps.sort_unstable();
    steps.dedup();
    let top = *steps.last().expect("validated non-empty");
    let fine = TimeGrid::new(lq.horizon, top)?;
    let policy = harness_policy();
    let per_path = par_paths(cfg.n_paths, |j| {
        let noise = PathNoise::draw(&spec, &fine, cfg.seed, j)?;
        steps
            .iter()
            .map(|&n| {
                let p =
                    coupled_forward_noise(&spec, &policy, &noise.coarsen(top / n)?, &FilterConfig::default(), false)?;
                Ok((oracle_mse(&p, &spec)?, path_cost(&spec, &p.bundle)))
            })
            .collect::<hybridmp::Result<Vec<_>>>()
    })?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let mse = per_path.iter().map(|r| r[c].0).sum::<f64>() / per_path.len() as f64;
            let cost = Estimate::from_samples(&per_path.iter().map(|r| r[c].1).collect::<Vec<_>>());
            SweepRow { n_steps: n, oracle_rmse: mse.sqrt(), cost_mean: cost.mean, cost_se: cost.std_error }
        })
        .collect())
}

fn convergence_sweep(cfg: &ExperimentConfig, lq: &LqSpec) -> Result<Report> {
    let rows = sweep_table(cfg, lq)?;
    let mut report = Report::new(cfg);
    if rows.len() >= 2 {
        let floor = cfg.tolerance("oracle_rmse_floor", 1e-9);
        let violations =
            rows.windows(2).filter(|w| !(w[1].oracle_rmse < w[0].oracle_rmse || w[1].oracle_rmse <= floor)).count();
        report.results.metric("oracle_rmse_monotone_violations", Metric::at_most(violations as f64, 0.0));
    }
    for row in &rows {
        report.results.value(&format!("oracle_rmse_n{}", row.n_steps), row.oracle_rmse);
    }
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        wtr.serialize(row).map_err(hybridmp::Error::from)?;
    }
    let bytes = wtr.into_inner().map_err(|e| HarnessError::Run(hybridmp::Error::Numerical(e.to_string())))?;
    report.file("sweep.csv", bytes);
    Ok(report)
}
