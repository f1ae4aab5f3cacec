//! Linear-quadratic regime-switching problem
//!
//! ```text
//! dX = (a(alpha) X + b(alpha) u) dt + sigma dW,
//! J  = E[ int 1/2 (Q(alpha) X^2 + R(alpha) u^2) dt + 1/2 G(alpha) X_T^2 ],
//! ```
//!
//! solved under partial observation by a damped Picard iteration on the
//! observable control formula, with a fully observed Riccati benchmark.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    solve_adjoint_bsde, stationarity_residual, AdjointEnsemble, BsdeConfig, CompactCoeffs, Stationarity,
};
use crate::error::{Error, Result};
use crate::model::{Coefficients, ControlDomain, FeedbackPolicy, Generator, ProblemSpec, Regime};
use crate::pathsim::{par_paths, path_cost, PathNoise, TimeGrid};
use crate::regress::{bounded_degree, total_degree, PolyBasis, Projector};
use crate::stats::Estimate;
use crate::wonham::Ensemble;

/// Constants of the LQ problem. `pi0` is the prior probability of regime 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqSpec {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub sigma: f64,
    #[serde(rename = "Q1")]
    pub q1: f64,
    #[serde(rename = "Q2")]
    pub q2: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "G1")]
    pub g1: f64,
    #[serde(rename = "G2")]
    pub g2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x0: f64,
    pub pi0: f64,
}

impl Default for LqSpec {
    fn default() -> Self {
        Self {
            a1: 0.5,
            a2: -0.5,
            b1: 1.0,
            b2: 0.5,
            sigma: 0.3,
            q1: 1.0,
            q2: 1.0,
            r1: 1.0,
            r2: 2.0,
            g1: 1.0,
            g2: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            horizon: 1.0,
            x0: 1.0,
            pi0: 0.5,
        }
    }
}

impl LqSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let lq: Self = serde_json::from_str(text)?;
        lq.validate()?;
        Ok(lq)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `sigma > 0`, `R > 0`, `Q, G >= 0`, nonnegative rates, `pi0` in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a1,
            self.a2,
            self.b1,
            self.b2,
            self.sigma,
            self.q1,
            self.q2,
            self.r1,
            self.r2,
            self.g1,
            self.g2,
            self.lambda1,
            self.lambda2,
            self.horizon,
            self.x0,
            self.pi0,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("LQ constants must be finite".into()));
        }
        if !(self.sigma > 0.0 && self.r1 > 0.0 && self.r2 > 0.0) {
            return Err(Error::Config("need sigma > 0 and R(i) > 0".into()));
        }
        if self.q1 < 0.0 || self.q2 < 0.0 || self.g1 < 0.0 || self.g2 < 0.0 {
            return Err(Error::Config("need Q(i) >= 0 and G(i) >= 0".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("switching rates must be nonnegative".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pi0) {
            return Err(Error::Config(format!("pi0 = {} outside [0, 1]", self.pi0)));
        }
        Ok(())
    }

    /// The LQ-tagged problem on the real line.
    pub fn problem(&self) -> Result<ProblemSpec> {
        self.validate()?;
        let spec = ProblemSpec::new(
            self.horizon,
            self.x0,
            vec![self.pi0, 1.0 - self.pi0],
            Generator::two_state(self.lambda1, self.lambda2)?,
            Arc::new(LqCoefficients(*self)),
        )?;
        Ok(spec.with_sigma_min(self.sigma.min(1e-8)).with_lq_tag(*self))
    }

    /// The same problem with regime labels exchanged.
    pub fn swap_regimes(&self) -> Self {
        Self {
            a1: self.a2,
            a2: self.a1,
            b1: self.b2,
            b2: self.b1,
            q1: self.q2,
            q2: self.q1,
            r1: self.r2,
            r2: self.r1,
            g1: self.g2,
            g2: self.g1,
            lambda1: self.lambda2,
            lambda2: self.lambda1,
            pi0: 1.0 - self.pi0,
            ..*self
        }
    }

    fn regime(&self, i: Regime) -> (f64, f64, f64, f64, f64) {
        if i == Regime::FIRST {
            (self.a1, self.b1, self.q1, self.r1, self.g1)
        } else {
            (self.a2, self.b2, self.q2, self.r2, self.g2)
        }
    }

    fn r_bar(&self, pi: f64) -> f64 {
        self.r1 * pi + self.r2 * (1.0 - pi)
    }
}

#[derive(Debug, Clone, Copy)]
struct LqCoefficients(LqSpec);

impl Coefficients for LqCoefficients {
    fn drift(&self, _t: f64, x: f64, regime: Regime, v: f64) -> f64 {
        let (a, b, ..) = self.0.regime(regime);
        a * x + b * v
    }

    fn volatility(&self, _t: f64, _x: f64, _v: f64) -> f64 {
        self.0.sigma
    }

    fn running_cost(&self, _t: f64, x: f64, regime: Regime, v: f64) -> f64 {
        let (_, _, q, r, _) = self.0.regime(regime);
        0.5 * (q * x * x + r * v * v)
    }

    fn terminal_cost(&self, x: f64, regime: Regime) -> f64 {
        0.5 * self.0.regime(regime).4 * x * x
    }
}

/// `u = -(R(1) pi + R(2)(1 - pi))^{-1} [p (b(1) pi + b(2)(1 - pi)) + K sigma^{-1} (b(1) - b(2)) pi (1 - pi)]`.
pub fn lq_control_formula(lq: &LqSpec, pi: f64, p: f64, k: f64) -> f64 {
    let b_bar = lq.b1 * pi + lq.b2 * (1.0 - pi);
    -(p * b_bar + k / lq.sigma * (lq.b1 - lq.b2) * pi * (1.0 - pi)) / lq.r_bar(pi)
}

/// Per-node polynomial feedback `u(t_k, x, pi) = N_k(x, pi) / (R(1) pi + R(2)(1 - pi))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFeedback {
    grid: TimeGrid,
    lq: LqSpec,
    domain: ControlDomain,
    nodes: Vec<(PolyBasis, Vec<f64>)>,
}

/// Monomials `x^i pi^j` with `i <= level` and `i + j <= level + 2`.
fn numerator_exponents(n_active: usize, level: u32) -> Vec<Vec<u32>> {
    match n_active {
        2 => bounded_degree(&[level, level + 2], level + 2),
        n => total_degree(n, level + 2),
    }
}

impl PolyFeedback {
    pub fn zero(lq: &LqSpec, grid: &TimeGrid, domain: ControlDomain) -> Self {
        let basis = PolyBasis::with_standardization(vec![0.0, 0.0], vec![1.0, 1.0], Vec::new(), vec![Vec::new()]);
        Self { grid: *grid, lq: *lq, domain, nodes: vec![(basis, vec![0.0]); grid.n_nodes()] }
    }

    pub fn value(&self, k: usize, x: f64, pi: f64) -> f64 {
        let (basis, coef) = &self.nodes[k.min(self.nodes.len() - 1)];
        let u = basis.evaluate(coef, &[x, pi]) / self.lq.r_bar(pi);
        if u.is_nan() {
            self.domain.clamp(0.0)
        } else {
            self.domain.clamp(u)
        }
    }

    pub fn feedback(self: &Arc<Self>, lipschitz: f64) -> FeedbackPolicy {
        let me = Arc::clone(self);
        FeedbackPolicy::new(self.domain, lipschitz, move |t, x, pi| me.value(me.grid.nearest(t), x, pi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    pub max_iter: usize,
    /// Damping `theta` in `(0, 1]`.
    pub damping: f64,
    /// Relative tolerance on the sup-lattice control change.
    pub tol: f64,
    pub seed: u64,
    pub bsde: BsdeConfig,
    /// Lattice points per axis for the control-change measure.
    pub lattice_points: usize,
    /// Time slices of the lattice.
    pub lattice_times: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            damping: 0.5,
            tol: 1e-3,
            seed: 42,
            bsde: BsdeConfig::default(),
            lattice_points: 11,
            lattice_times: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    #[serde(rename = "SE")]
    pub se: f64,
    pub residual: f64,
    pub sup_control_change: f64,
}

/// State box per lattice time slice: node, `x` range and `pi` range.
type Lattice = Vec<(usize, (f64, f64), (f64, f64))>;

fn lattice(ens: &Ensemble, slices: usize) -> Lattice {
    let n = ens.grid.n_steps();
    let mut ks: Vec<usize> = (0..slices).map(|i| i * n / slices).collect();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let xs: crate::stats::Accumulator = ens.paths.iter().map(|p| p.bundle.x[k]).collect();
            let ps: crate::stats::Accumulator = ens.paths.iter().map(|p| p.filter.pi(k)).collect();
            let (sx, sp) = (xs.variance().sqrt(), ps.variance().sqrt());
            let pr = ((ps.mean() - 2.0 * sp).max(0.0), (ps.mean() + 2.0 * sp).min(1.0));
            (k, (xs.mean() - 2.0 * sx, xs.mean() + 2.0 * sx), pr)
        })
        .collect()
}

fn points(range: (f64, f64), m: usize) -> Vec<f64> {
    if m < 2 || range.1 <= range.0 {
        return vec![range.0];
    }
    (0..m).map(|i| range.0 + (range.1 - range.0) * i as f64 / (m - 1) as f64).collect()
}

/// `(sup |a - b|, sup |b|)` over the lattice.
fn lattice_change(a: &PolyFeedback, b: &PolyFeedback, lat: &Lattice, m: usize) -> (f64, f64) {
    let mut change: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for &(k, xr, pr) in lat {
        for x in points(xr, m) {
            for pi in points(pr, m) {
                let (ua, ub) = (a.value(k, x, pi), b.value(k, x, pi));
                change = change.max((ua - ub).abs());
                scale = scale.max(ub.abs());
            }
        }
    }
    (change, scale)
}

/// Converged (or last) iterate of [`solve_lq`].
#[derive(Debug, Clone)]
pub struct LqSolution {
    pub lq: LqSpec,
    pub policy: Arc<PolyFeedback>,
    /// Ensemble simulated under `policy`, with its adjoint.
    pub ensemble: Ensemble,
    pub adjoint: AdjointEnsemble,
    pub stationarity: Stationarity,
    /// Stationarity residual of the zero control, the reference scale.
    pub residual_at_zero: f64,
    pub cost: Estimate,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    /// Largest pathwise gap between the refit policy and its target.
    pub refit_max_residual: f64,
    /// Largest pathwise gap between the control formula and the applied control.
    pub formula_gap: f64,
    pub control_scale: f64,
}

impl LqSolution {
    pub fn feedback(&self) -> FeedbackPolicy {
        self.policy.feedback(1e3)
    }

    pub fn require_converged(&self) -> Result<&Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.trace.len(),
                last_change: self.trace.last().map_or(f64::NAN, |r| r.sup_control_change),
            })
        }
    }

    /// CSV with columns `iter, cost, SE, residual, sup_control_change`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for r in &self.trace {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Control on an `m x m` lattice over `x` in `x_range` and `pi` in `[0, 1]`
    /// at the given times; columns `t, x, pi, u`.
    pub fn write_control_surface_csv<W: Write>(
        &self,
        out: W,
        times: &[f64],
        x_range: (f64, f64),
        m: usize,
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "x", "pi", "u"])?;
        let grid = self.ensemble.grid;
        for &t in times {
            let k = grid.nearest(t);
            for x in points(x_range, m) {
                for pi in points((0.0, 1.0), m) {
                    let u = self.policy.value(k, x, pi);
                    wtr.write_record([grid.node(k), x, pi, u].iter().map(|v| v.to_string()))?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn realised_cost(spec: &ProblemSpec, ens: &Ensemble) -> Estimate {
    let costs: Vec<f64> = ens.paths.par_iter().map(|p| path_cost(spec, &p.bundle)).collect();
    Estimate::from_samples(&costs)
}

/// Formula control per path on node `k` of the ensemble.
fn formula_at(lq: &LqSpec, ens: &Ensemble, adj: &AdjointEnsemble, k: usize, j: usize) -> f64 {
    lq_control_formula(lq, ens.paths[j].filter.pi(k), adj.phi(k, j)[0], adj.lambda(k, j)[1])
}

/// Damped Picard iteration for the observable optimal control.
///
/// Each iteration simulates the ensemble under the current feedback with
/// the same seed, solves the adjoint, and refits
/// `(1 - theta) u + theta * formula(pi, p, K)` per node. The refit is done on
/// `R(pi) u`, which is polynomial in `(x, pi)` whenever `p` and `K` are.
pub fn solve_lq(lq: &LqSpec, grid: &TimeGrid, n_paths: usize, cfg: &PicardConfig) -> Result<LqSolution> {
    let spec = lq.problem()?;
    solve_lq_on(&spec, grid, n_paths, cfg)
}

/// [`solve_lq`] for an LQ-tagged problem, honouring its control domain.
pub fn solve_lq_on(spec: &ProblemSpec, grid: &TimeGrid, n_paths: usize, cfg: &PicardConfig) -> Result<LqSolution> {
    let lq = *spec.lq_tag().ok_or_else(|| Error::Config("solve_lq needs an LQ-tagged problem".into()))?;
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::Config(format!("damping {} outside (0, 1]", cfg.damping)));
    }
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::Config("need tol > 0 and max_iter >= 1".into()));
    }
    let cc = CompactCoeffs::build(spec)?;
    let theta = cfg.damping;
    let n = grid.n_steps();
    let mut policy = Arc::new(PolyFeedback::zero(&lq, grid, spec.control_domain));
    let mut trace = Vec::new();
    let mut residual_at_zero = f64::NAN;
    for iter in 0..cfg.max_iter {
        let ens = Ensemble::simulate(spec, &policy.feedback(spec.lipschitz_bound), grid, n_paths, cfg.seed)?;
        let adj = solve_adjoint_bsde(&cc, &ens, &cfg.bsde)?;
        let stat = stationarity_residual(&cc, &ens, &adj)?;
        if iter == 0 {
            residual_at_zero = stat.residual;
        }
        let cost = realised_cost(spec, &ens);

        let fits: Vec<((PolyBasis, Vec<f64>), f64)> = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut features = Vec::with_capacity(2 * n_paths);
                let mut target = Vec::with_capacity(n_paths);
                let mut plain = Vec::with_capacity(n_paths);
                for (j, p) in ens.paths.iter().enumerate() {
                    let pi = p.filter.pi(k);
                    let t = (1.0 - theta) * p.bundle.u[k] + theta * formula_at(&lq, &ens, &adj, k, j);
                    features.extend_from_slice(&[p.bundle.x[k], pi]);
                    target.push(lq.r_bar(pi) * t);
                    plain.push(t);
                }
                let proj = Projector::with_fallback(&features, 2, 3, numerator_exponents, cfg.bsde.rank_tol)?;
                let fit = proj.project(&target, 1);
                let worst = fit
                    .fitted
                    .iter()
                    .zip(&plain)
                    .enumerate()
                    .map(|(j, (f, t))| (f / lq.r_bar(features[2 * j + 1]) - t).abs())
                    .fold(0.0, f64::max);
                Ok(((proj.basis().clone(), fit.coef.into_iter().next().unwrap_or_default()), worst))
            })
            .collect::<Result<_>>()?;
        let refit_max_residual = fits.iter().map(|f| f.1).fold(0.0, f64::max);
        let mut nodes: Vec<(PolyBasis, Vec<f64>)> = fits.into_iter().map(|f| f.0).collect();
        nodes.push(nodes[n - 1].clone());
        let next = Arc::new(PolyFeedback { grid: *grid, lq, domain: spec.control_domain, nodes });

        let lat = lattice(&ens, cfg.lattice_times);
        let (change, scale) = lattice_change(&next, &policy, &lat, cfg.lattice_points);
        let control_scale = scale.max(1.0);
        trace.push(IterationRecord {
            iter,
            cost: cost.mean,
            se: cost.std_error,
            residual: stat.residual,
            sup_control_change: change,
        });
        log::info!(
            "picard {iter}: cost {:.6} (se {:.2e}) residual {:.3e} change {change:.3e}",
            cost.mean,
            cost.std_error,
            stat.residual
        );
        let converged = change <= cfg.tol * control_scale;
        if converged || iter + 1 == cfg.max_iter {
            let formula_gap = (0..n)
                .into_par_iter()
                .map(|k| {
                    (0..ens.len())
                        .map(|j| (formula_at(&lq, &ens, &adj, k, j) - ens.paths[j].bundle.u[k]).abs())
                        .fold(0.0, f64::max)
                })
                .reduce(|| 0.0, f64::max);
            if !converged {
                log::warn!("Picard iteration stopped after {} iterations, change {change:.3e}", cfg.max_iter);
            }
            return Ok(LqSolution {
                lq,
                policy,
                ensemble: ens,
                adjoint: adj,
                stationarity: stat,
                residual_at_zero,
                cost,
                trace,
                converged,
                refit_max_residual,
                formula_gap,
                control_scale,
            });
        }
        policy = next;
    }
    unreachable!("the loop returns on its last iteration")
}

/// Per-regime Riccati solution `K_i(t_k)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub k: Vec<[f64; 2]>,
}

impl RiccatiSolution {
    /// Fully observed feedback `u = -K_i b(i) x / R(i)` at node `k`.
    pub fn control(&self, lq: &LqSpec, k: usize, regime: Regime, x: f64) -> f64 {
        let (_, b, _, r, _) = lq.regime(regime);
        -self.k[k][regime.slot()] * b * x / r
    }
}

fn riccati_rhs(lq: &LqSpec, k: [f64; 2]) -> [f64; 2] {
    let f = |a: f64, b: f64, q: f64, r: f64, ki: f64, kj: f64, rate: f64| {
        -(2.0 * a * ki + q - ki * ki * b * b / r + rate * (kj - ki))
    };
    [f(lq.a1, lq.b1, lq.q1, lq.r1, k[0], k[1], lq.lambda1), f(lq.a2, lq.b2, lq.q2, lq.r2, k[1], k[0], lq.lambda2)]
}

/// Integrates the coupled Riccati system backward from `K_i(T) = G(i)`
/// with classical Runge-Kutta, four substeps per grid step.
pub fn solve_riccati(lq: &LqSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let n = grid.n_steps();
    let sub = 4;
    let h = -grid.dt() / sub as f64;
    let mut k = vec![[0.0; 2]; n + 1];
    let mut cur = [lq.g1, lq.g2];
    k[n] = cur;
    let add = |a: [f64; 2], b: [f64; 2], s: f64| [a[0] + s * b[0], a[1] + s * b[1]];
    for step in (0..n).rev() {
        for _ in 0..sub {
            let k1 = riccati_rhs(lq, cur);
            let k2 = riccati_rhs(lq, add(cur, k1, h / 2.0));
            let k3 = riccati_rhs(lq, add(cur, k2, h / 2.0));
            let k4 = riccati_rhs(lq, add(cur, k3, h));
            for i in 0..2 {
                cur[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if !cur.iter().all(|v| v.is_finite() && v.abs() < 1e12) {
            return Err(Error::Numerical(format!("Riccati solution blew up at t = {}", grid.node(step))));
        }
        k[step] = cur;
    }
    Ok(RiccatiSolution { grid: *grid, k })
}

/// Fully observed benchmark cost with its Riccati solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub riccati: RiccatiSolution,
    pub cost: Estimate,
}

/// Realised cost of the fully observed optimal feedback, simulated on the
/// same noise streams as [`solve_lq`] with the same seed.
pub fn full_observation_baseline(lq: &LqSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Baseline> {
    if n_paths < 2 {
        return Err(Error::Config("the baseline needs at least two paths".into()));
    }
    let spec = lq.problem()?;
    let riccati = solve_riccati(lq, grid)?;
    let dt = grid.dt();
    let costs = par_paths(n_paths, |j| {
        let noise = PathNoise::draw(&spec, grid, seed, j)?;
        let mut x = lq.x0;
        let mut acc = 0.0;
        for k in 0..grid.n_steps() {
            let i = noise.alpha[k];
            let (a, b, q, r, _) = lq.regime(i);
            let u = riccati.control(lq, k, i, x);
            acc += 0.5 * (q * x * x + r * u * u) * dt;
            x += (a * x + b * u) * dt + lq.sigma * noise.dw[k];
        }
        Ok(acc + 0.5 * lq.regime(noise.alpha[grid.n_steps()]).4 * x * x)
    })?;
    Ok(Baseline { riccati, cost: Estimate::from_samples(&costs) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_keys() {
        let lq = LqSpec::default();
        let text = lq.to_json().unwrap();
        for key in [
            "a1", "a2", "b1", "b2", "sigma", "Q1", "Q2", "R1", "R2", "G1", "G2", "lambda1", "lambda2", "T", "x0", "pi0",
        ] {
            assert!(text.contains(&format!("\"{key}\"")), "{key}");
        }
        assert_eq!(LqSpec::from_json(&text).unwrap(), lq);
        let spec = ProblemSpec::from_json(&text).unwrap();
        assert_eq!(spec.to_json().unwrap(), text);
    }

    #[test]
    fn invalid_documents_are_rejected() {
        let ok = LqSpec::default().to_json().unwrap();
        assert!(LqSpec::from_json(&ok.replace("\"R2\": 2.0", "\"R2\": 0.0")).is_err());
        assert!(LqSpec::from_json(&ok.replace("\"sigma\": 0.3", "\"sigma\": -1.0")).is_err());
        assert!(LqSpec::from_json(&ok.replace("\"Q1\": 1.0", "\"Q1\": -1.0")).is_err());
        assert!(LqSpec::from_json(&ok.replace("\"pi0\": 0.5", "\"pi0\": 1.5")).is_err());
        assert!(LqSpec::from_json(&ok.replace("\"x0\"", "\"extra\": 1, \"x0\"")).is_err());
        assert!(LqSpec::from_json("{").is_err());
    }

    #[test]
    fn control_formula_examples() {
        let same = LqSpec { b1: 1.5, b2: 1.5, r1: 2.0, r2: 2.0, ..LqSpec::default() };
        for pi in [0.0, 0.3, 1.0] {
            assert!((lq_control_formula(&same, pi, 0.8, 5.0) - (-0.8 * 1.5 / 2.0)).abs() < 1e-15);
        }
        let d = LqSpec::default();
        assert!((lq_control_formula(&d, 0.0, 0.8, 5.0) - (-0.8 * d.b2 / d.r2)).abs() < 1e-15);
        let ex = LqSpec { b1: 1.0, b2: -1.0, r1: 1.0, r2: 1.0, sigma: 1.0, ..LqSpec::default() };
        assert!((lq_control_formula(&ex, 0.5, 2.0, 4.0) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_riccati_solution() {
        let lq = LqSpec { q1: 0.0, q2: 0.0, g1: 0.0, g2: 0.0, ..LqSpec::default() };
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let b = full_observation_baseline(&lq, &grid, 100, 1).unwrap();
        assert!(b.riccati.k.iter().all(|k| *k == [0.0, 0.0]));
        assert!(b.cost.mean.abs() < 1e-15);
    }

    #[test]
    fn riccati_blow_up_is_reported() {
        // Negative-definite terminal weight is outside the validated class,
        // so construct the constants directly.
        let lq = LqSpec { g1: -50.0, g2: -50.0, b1: 3.0, b2: 3.0, horizon: 5.0, ..LqSpec::default() };
        let grid = TimeGrid::new(5.0, 500).unwrap();
        assert!(matches!(solve_riccati(&lq, &grid), Err(Error::Numerical(_))));
    }

    #[test]
    fn swapped_spec_is_an_involution() {
        let lq = LqSpec { lambda1: 2.0, pi0: 0.25, ..LqSpec::default() };
        assert_eq!(lq.swap_regimes().swap_regimes(), lq);
        assert_eq!(lq.swap_regimes().a1, lq.a2);
    }

    #[test]
    fn zero_feedback_is_zero() {
        let lq = LqSpec::default();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let p = Arc::new(PolyFeedback::zero(&lq, &grid, ControlDomain::REAL_LINE));
        let f = p.feedback(1.0);
        assert_eq!(f.evaluate(0.3, 2.0, 0.4), 0.0);
    }

    #[test]
    fn numerator_basis_sizes() {
        assert_eq!(numerator_exponents(2, 3).len(), 18);
        assert_eq!(numerator_exponents(1, 3).len(), 6);
        assert_eq!(numerator_exponents(0, 3).len(), 1);
    }

    #[test]
    fn zero_cost_problem_converges_immediately() {
        let lq = LqSpec { q1: 0.0, q2: 0.0, g1: 0.0, g2: 0.0, ..LqSpec::default() };
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let sol = solve_lq(&lq, &grid, 500, &PicardConfig::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.cost.mean.abs() < 1e-12);
        assert!(sol.stationarity.residual < 1e-12);
    }

    #[test]
    fn small_picard_run_converges_and_reduces_cost() {
        let lq = LqSpec::default();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let cfg = PicardConfig { tol: 1e-4, ..PicardConfig::default() };
        let sol = solve_lq(&lq, &grid, 2000, &cfg).unwrap();
        sol.require_converged().unwrap();
        assert!(sol.trace.len() >= 3);
        let first = sol.trace[0];
        assert!(sol.cost.mean < first.cost - 3.0 * first.se, "{:?}", sol.trace);
        assert!(sol.stationarity.residual <= 1e-2 * sol.residual_at_zero, "{:?}", sol.stationarity);
        assert!(sol.refit_max_residual <= 0.05 * sol.control_scale, "{}", sol.refit_max_residual);
        let mut buf = Vec::new();
        sol.write_trace_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("iter,cost,SE,residual,sup_control_change\n"));
        let mut buf = Vec::new();
        sol.write_control_surface_csv(&mut buf, &[0.0, 0.5], (-2.0, 2.0), 5).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 1 + 2 * 25);
    }

    #[test]
    fn bad_damping_is_rejected() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let cfg = PicardConfig { damping: 0.0, ..PicardConfig::default() };
        assert!(matches!(solve_lq(&LqSpec::default(), &grid, 500, &cfg), Err(Error::Config(_))));
    }
}
