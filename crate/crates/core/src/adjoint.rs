//! The completely observed system in `Theta = (X, pi)`, its variational
//! equation, the adjoint BSDE and the first-order optimality residual.
//!
//! With `Phi = (p, k)` and `Lambda = (P, K)` the adjoint equation reads
//!
//! ```text
//! -dPhi = [B_Theta^T Phi + Sigma_Theta^T Lambda + F_Theta] dt - Lambda dnu,
//! Phi_T = G_Theta(Theta_T),
//! ```
//!
//! and is solved backwards by least-squares regression on polynomials in
//! `(X_k, pi_k)`. The components are indexed so that `M[i][j]` is the
//! derivative of component `i` with respect to `Theta_j`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lq::LqSpec;
use crate::model::{fd_step, ProblemSpec, Regime};
use crate::pathsim::{grid_from_times, TimeGrid};
use crate::regress::{total_degree, Projector};
use crate::stats::{Accumulator, Estimate};
use crate::wonham::{Ensemble, ObservedPath};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

/// Values and partials of the compact coefficients at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactEval {
    pub b: Vec2,
    pub sigma: Vec2,
    pub f: f64,
    pub b_theta: Mat2,
    pub b_v: Vec2,
    pub sigma_theta: Mat2,
    pub sigma_v: Vec2,
    pub f_theta: Vec2,
    pub f_v: f64,
}

impl CompactEval {
    /// `B_Theta^T phi + Sigma_Theta^T lambda + F_Theta`.
    pub fn driver(&self, phi: &[f64], lambda: &[f64]) -> Vec2 {
        let mut out = self.f_theta;
        for (j, o) in out.iter_mut().enumerate() {
            for i in 0..2 {
                *o += self.b_theta[i][j] * phi[i] + self.sigma_theta[i][j] * lambda[i];
            }
        }
        out
    }

    /// `<phi, B> + <lambda, Sigma> + F`.
    pub fn hamiltonian(&self, phi: &[f64], lambda: &[f64]) -> f64 {
        dot(phi, &self.b) + dot(lambda, &self.sigma) + self.f
    }

    /// `<phi, B_v> + <lambda, Sigma_v> + F_v`.
    pub fn hamiltonian_v(&self, phi: &[f64], lambda: &[f64]) -> f64 {
        dot(phi, &self.b_v) + dot(lambda, &self.sigma_v) + self.f_v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &Mat2, v: &Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Terminal cost and its gradient in `Theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalEval {
    pub g: f64,
    pub g_theta: Vec2,
}

/// Compact coefficient maps of a two-regime problem. Partials are analytic
/// for LQ-tagged problems and central differences otherwise.
#[derive(Debug, Clone)]
pub struct CompactCoeffs {
    spec: ProblemSpec,
    lq: Option<LqSpec>,
    rates: (f64, f64),
}

impl CompactCoeffs {
    pub fn build(spec: &ProblemSpec) -> Result<Self> {
        let rates = spec
            .generator
            .two_state_rates()
            .ok_or_else(|| Error::Config("the compact system needs a two-state chain".into()))?;
        Ok(Self { spec: spec.clone(), lq: spec.lq_tag().cloned(), rates })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn is_analytic(&self) -> bool {
        self.lq.is_some()
    }

    pub fn eval(&self, t: f64, theta: Vec2, v: f64) -> Result<CompactEval> {
        match &self.lq {
            Some(lq) => Ok(lq_eval(lq, theta, v)),
            None => self.fd_eval(t, theta, v),
        }
    }

    pub fn terminal(&self, theta: Vec2) -> TerminalEval {
        let [x, pi] = theta;
        if let Some(lq) = &self.lq {
            return TerminalEval {
                g: 0.5 * (lq.g1 * pi + lq.g2 * (1.0 - pi)) * x * x,
                g_theta: [(lq.g1 * pi + lq.g2 * (1.0 - pi)) * x, 0.5 * (lq.g1 - lq.g2) * x * x],
            };
        }
        let c = self.spec.coefficients.as_ref();
        let g = |x: f64, i| c.terminal_cost(x, i);
        let (g1, g2) = (g(x, Regime::FIRST), g(x, Regime::SECOND));
        let dx = fd_step(x);
        let gx = |i| (g(x + dx, i) - g(x - dx, i)) / (2.0 * dx);
        TerminalEval {
            g: g1 * pi + g2 * (1.0 - pi),
            g_theta: [gx(Regime::FIRST) * pi + gx(Regime::SECOND) * (1.0 - pi), g1 - g2],
        }
    }

    fn fd_eval(&self, t: f64, theta: Vec2, v: f64) -> Result<CompactEval> {
        let [x, pi] = theta;
        let (l1, l2) = self.rates;
        let c = self.spec.coefficients.as_ref();
        let (r1, r2) = (Regime::FIRST, Regime::SECOND);
        let w = pi * (1.0 - pi);
        let mix = |f1: f64, f2: f64| f1 * pi + f2 * (1.0 - pi);
        let sig = |x: f64, v: f64| self.spec.volatility(t, x, v);
        let hgap = |x: f64, v: f64| -> Result<f64> { Ok((c.drift(t, x, r1, v) - c.drift(t, x, r2, v)) / sig(x, v)?) };
        let (hx, hv) = (fd_step(x), fd_step(v));
        let ddx = |f: &dyn Fn(f64) -> f64| (f(x + hx) - f(x - hx)) / (2.0 * hx);
        let ddv = |f: &dyn Fn(f64) -> f64| (f(v + hv) - f(v - hv)) / (2.0 * hv);

        let s = sig(x, v)?;
        let (b1, b2) = (c.drift(t, x, r1, v), c.drift(t, x, r2, v));
        let (f1, f2) = (c.running_cost(t, x, r1, v), c.running_cost(t, x, r2, v));
        let gap = (b1 - b2) / s;
        let s_x = (sig(x + hx, v)? - sig(x - hx, v)?) / (2.0 * hx);
        let s_v = (sig(x, v + hv)? - sig(x, v - hv)?) / (2.0 * hv);
        let gap_x = (hgap(x + hx, v)? - hgap(x - hx, v)?) / (2.0 * hx);
        let gap_v = (hgap(x, v + hv)? - hgap(x, v - hv)?) / (2.0 * hv);
        let bx = |i| ddx(&|y| c.drift(t, y, i, v));
        let bv = |i| ddv(&|u| c.drift(t, x, i, u));
        let fx = |i| ddx(&|y| c.running_cost(t, y, i, v));
        let fv = |i| ddv(&|u| c.running_cost(t, x, i, u));
        Ok(CompactEval {
            b: [mix(b1, b2), -l1 * pi + l2 * (1.0 - pi)],
            sigma: [s, gap * w],
            f: mix(f1, f2),
            b_theta: [[mix(bx(r1), bx(r2)), b1 - b2], [0.0, -l1 - l2]],
            b_v: [mix(bv(r1), bv(r2)), 0.0],
            sigma_theta: [[s_x, 0.0], [gap_x * w, gap * (1.0 - 2.0 * pi)]],
            sigma_v: [s_v, gap_v * w],
            f_theta: [mix(fx(r1), fx(r2)), f1 - f2],
            f_v: mix(fv(r1), fv(r2)),
        })
    }
}

fn lq_eval(lq: &LqSpec, theta: Vec2, u: f64) -> CompactEval {
    let [x, pi] = theta;
    let w = pi * (1.0 - pi);
    let mix = |a: f64, b: f64| a * pi + b * (1.0 - pi);
    let s = lq.sigma;
    let gap = (lq.a1 - lq.a2) * x + (lq.b1 - lq.b2) * u;
    CompactEval {
        b: [mix(lq.a1, lq.a2) * x + mix(lq.b1, lq.b2) * u, -lq.lambda1 * pi + lq.lambda2 * (1.0 - pi)],
        sigma: [s, gap / s * w],
        f: 0.5 * mix(lq.q1 * x * x + lq.r1 * u * u, lq.q2 * x * x + lq.r2 * u * u),
        b_theta: [[mix(lq.a1, lq.a2), gap], [0.0, -lq.lambda1 - lq.lambda2]],
        b_v: [mix(lq.b1, lq.b2), 0.0],
        sigma_theta: [[0.0, 0.0], [(lq.a1 - lq.a2) / s * w, gap / s * (1.0 - 2.0 * pi)]],
        sigma_v: [0.0, (lq.b1 - lq.b2) / s * w],
        f_theta: [mix(lq.q1, lq.q2) * x, 0.5 * ((lq.q1 - lq.q2) * x * x + (lq.r1 - lq.r2) * u * u)],
        f_v: mix(lq.r1, lq.r2) * u,
    }
}

pub fn hamiltonian(cc: &CompactCoeffs, t: f64, theta: Vec2, v: f64, phi: Vec2, lambda: Vec2) -> Result<f64> {
    Ok(cc.eval(t, theta, v)?.hamiltonian(&phi, &lambda))
}

pub fn hamiltonian_v(cc: &CompactCoeffs, t: f64, theta: Vec2, v: f64, phi: Vec2, lambda: Vec2) -> Result<f64> {
    Ok(cc.eval(t, theta, v)?.hamiltonian_v(&phi, &lambda))
}

fn theta_at(path: &ObservedPath, k: usize) -> Vec2 {
    [path.bundle.x[k], path.filter.pi(k)]
}

/// First-order state perturbation `Gamma = (xi, eta)` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPath {
    pub grid: TimeGrid,
    pub gamma: Vec<Vec2>,
}

/// Euler scheme for `dGamma = [B_Theta Gamma + B_v v] dt + [Sigma_Theta Gamma + Sigma_v v] dnu`
/// along the base path's innovation.
pub fn solve_variational(cc: &CompactCoeffs, base: &ObservedPath, v_dir: &[f64]) -> Result<VariationalPath> {
    let grid = base.bundle.grid;
    let dt = grid.dt();
    let n = grid.n_steps();
    if v_dir.len() < n {
        return Err(Error::Config("perturbation shorter than the grid".into()));
    }
    let mut gamma = Vec::with_capacity(n + 1);
    let mut g = [0.0, 0.0];
    gamma.push(g);
    for k in 0..n {
        let e = cc.eval(grid.node(k), theta_at(base, k), base.bundle.u[k])?;
        let drift = mat_vec(&e.b_theta, &g);
        let diff = mat_vec(&e.sigma_theta, &g);
        let dnu = base.filter.nu[k];
        for i in 0..2 {
            g[i] += (drift[i] + e.b_v[i] * v_dir[k]) * dt + (diff[i] + e.sigma_v[i] * v_dir[k]) * dnu;
        }
        gamma.push(g);
    }
    Ok(VariationalPath { grid, gamma })
}

/// `int (<F_Theta, Gamma> + F_v v) dt + <G_Theta, Gamma_T>` along one path.
pub fn first_order_term(cc: &CompactCoeffs, base: &ObservedPath, v_dir: &[f64], var: &VariationalPath) -> Result<f64> {
    let grid = base.bundle.grid;
    let n = grid.n_steps();
    let mut acc = 0.0;
    for k in 0..n {
        let e = cc.eval(grid.node(k), theta_at(base, k), base.bundle.u[k])?;
        acc += dot(&e.f_theta, &var.gamma[k]) + e.f_v * v_dir[k];
    }
    let term = cc.terminal(theta_at(base, n));
    Ok(acc * grid.dt() + dot(&term.g_theta, &var.gamma[n]))
}

/// Cost of the completely observed system driven by the base path's
/// innovation under the control sequence `u_k + eps * v_k`.
pub fn perturbed_cost(cc: &CompactCoeffs, base: &ObservedPath, v_dir: &[f64], eps: f64) -> Result<f64> {
    let grid = base.bundle.grid;
    let dt = grid.dt();
    let n = grid.n_steps();
    let domain = cc.spec.control_domain;
    let mut theta = [cc.spec.x0, cc.spec.pi0[0]];
    let mut acc = 0.0;
    for k in 0..n {
        let u = domain.clamp(base.bundle.u[k] + eps * v_dir[k]);
        let e = cc.eval(grid.node(k), theta, u)?;
        acc += e.f * dt;
        let dnu = base.filter.nu[k];
        theta[0] += e.b[0] * dt + e.sigma[0] * dnu;
        theta[1] = (theta[1] + e.b[1] * dt + e.sigma[1] * dnu).clamp(0.0, 1.0);
    }
    Ok(acc + cc.terminal(theta).g)
}

/// A bounded smooth perturbation `v(t, x) = amp * (sin(omega t + phase) + c tanh(x)) / (1 + |c|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
    pub state_weight: f64,
}

impl Direction {
    /// Five fixed directions used by the optimality checks.
    pub fn standard_set(amplitude: f64) -> Vec<Self> {
        [(1.0, 0.0, 0.0), (2.0, 1.0, 0.5), (3.0, 2.0, -1.0), (0.5, 4.0, 1.0), (5.0, 0.5, 0.0)]
            .iter()
            .map(|&(omega, phase, state_weight)| Self { amplitude, omega, phase, state_weight })
            .collect()
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.amplitude * ((self.omega * t + self.phase).sin() + self.state_weight * x.tanh())
            / (1.0 + self.state_weight.abs())
    }

    /// The direction sampled along a base path.
    pub fn along(&self, path: &ObservedPath) -> Vec<f64> {
        let grid = path.bundle.grid;
        (0..grid.n_nodes()).map(|k| self.value(grid.node(k), path.bundle.x[k])).collect()
    }
}

/// Outcome of comparing a finite-difference directional derivative with the
/// variational first-order term on common noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateauxCheck {
    pub eps: f64,
    pub finite_difference: f64,
    pub first_order: f64,
    /// Standard error of the paired per-path difference.
    pub std_error: f64,
}

impl GateauxCheck {
    pub fn gap(&self) -> f64 {
        (self.finite_difference - self.first_order).abs()
    }
}

pub fn gateaux_check(cc: &CompactCoeffs, ens: &Ensemble, dir: &Direction, eps: f64) -> Result<GateauxCheck> {
    let rows: Vec<(f64, f64)> = ens
        .paths
        .par_iter()
        .map(|p| {
            let v = dir.along(p);
            let base = perturbed_cost(cc, p, &v, 0.0)?;
            let bumped = perturbed_cost(cc, p, &v, eps)?;
            let var = solve_variational(cc, p, &v)?;
            Ok(((bumped - base) / eps, first_order_term(cc, p, &v, &var)?))
        })
        .collect::<Result<_>>()?;
    let fd: Accumulator = rows.iter().map(|r| r.0).collect();
    let fo: Accumulator = rows.iter().map(|r| r.1).collect();
    let diff: Accumulator = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(GateauxCheck { eps, finite_difference: fd.mean(), first_order: fo.mean(), std_error: diff.std_error() })
}

/// Paired cost change `J(u + eps v) - J(u)` on common noise.
pub fn cost_change(cc: &CompactCoeffs, ens: &Ensemble, dir: &Direction, eps: f64) -> Result<Estimate> {
    let rows: Vec<f64> = ens
        .paths
        .par_iter()
        .map(|p| {
            let v = dir.along(p);
            Ok(perturbed_cost(cc, p, &v, eps)? - perturbed_cost(cc, p, &v, 0.0)?)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&rows))
}

/// A backward equation `Phi_k = E[Phi_{k+1} + driver dt | F_k]`,
/// `Lambda_k = E[Phi_{k+1} dnu_k | F_k] / dt`, posed on a path ensemble.
pub trait BackwardProblem: Sync {
    fn grid(&self) -> TimeGrid;
    fn n_paths(&self) -> usize;
    /// Components of `Phi` (and of `Lambda`).
    fn dim(&self) -> usize;
    fn n_features(&self) -> usize;
    fn features(&self, path: usize, k: usize, out: &mut [f64]);
    fn innovation(&self, path: usize, k: usize) -> f64;
    fn terminal(&self, path: usize, out: &mut [f64]);
    fn driver(&self, path: usize, k: usize, phi_next: &[f64], lambda: &[f64], out: &mut [f64]) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsdeConfig {
    /// Total degree of the regression polynomials.
    pub degree: u32,
    pub rank_tol: f64,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        Self { degree: 3, rank_tol: 1e-12 }
    }
}

/// Regression diagnostics of one backward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub degree: u32,
    pub r2_phi: Vec<f64>,
    pub r2_lambda: Vec<f64>,
}

/// Fitted `(Phi, Lambda)` on every node of every path, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub degree: u32,
    phi: Vec<f64>,
    lambda: Vec<f64>,
    pub steps: Vec<StepDiagnostics>,
}

impl AdjointEnsemble {
    fn offset(&self, k: usize, path: usize) -> usize {
        (k * self.n_paths + path) * self.dim
    }

    pub fn phi(&self, k: usize, path: usize) -> &[f64] {
        let o = self.offset(k, path);
        &self.phi[o..o + self.dim]
    }

    pub fn lambda(&self, k: usize, path: usize) -> &[f64] {
        let o = self.offset(k, path);
        &self.lambda[o..o + self.dim]
    }

    /// Smallest per-step R² over all regressions.
    pub fn min_r2(&self) -> f64 {
        self.steps.iter().flat_map(|s| s.r2_phi.iter().chain(&s.r2_lambda)).copied().fold(f64::INFINITY, f64::min)
    }

    /// The two-component adjoint along one path.
    pub fn path(&self, j: usize) -> Result<AdjointPath> {
        if self.dim != 2 {
            return Err(Error::Config("adjoint paths are two-component".into()));
        }
        let nodes = self.grid.n_nodes();
        Ok(AdjointPath {
            grid: self.grid,
            phi: (0..nodes).map(|k| [self.phi(k, j)[0], self.phi(k, j)[1]]).collect(),
            lambda: (0..nodes).map(|k| [self.lambda(k, j)[0], self.lambda(k, j)[1]]).collect(),
            r2: self
                .steps
                .iter()
                .rev()
                .map(|s| s.r2_phi.iter().chain(&s.r2_lambda).copied().fold(1.0, f64::min))
                .collect(),
        })
    }
}

/// Solves a [`BackwardProblem`] by backward regression.
///
/// `Lambda_k` is projected from `(Phi_{k+1} - Phi~_k) dnu_k / dt`, where
/// `Phi~_k` is the projection of `Phi_{k+1}` itself; the subtraction leaves
/// the conditional expectation unchanged and removes most of its variance.
/// The terminal node carries `Lambda_T = Lambda_{n-1}`.
pub fn solve_backward<P: BackwardProblem + ?Sized>(problem: &P, cfg: &BsdeConfig) -> Result<AdjointEnsemble> {
    let grid = problem.grid();
    let (n, np, d, nf) = (grid.n_steps(), problem.n_paths(), problem.dim(), problem.n_features());
    let full = total_degree(nf, cfg.degree).len();
    if np < 10 * full {
        return Err(Error::Config(format!("{np} paths for {full} basis functions; need at least {}", 10 * full)));
    }
    let dt = grid.dt();
    let stride = np * d;
    let mut phi = vec![0.0; grid.n_nodes() * stride];
    let mut lambda = vec![0.0; grid.n_nodes() * stride];
    for j in 0..np {
        problem.terminal(j, &mut phi[n * stride + j * d..n * stride + (j + 1) * d]);
    }
    let mut steps = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let features: Vec<f64> = (0..np)
            .into_par_iter()
            .flat_map_iter(|j| {
                let mut row = vec![0.0; nf];
                problem.features(j, k, &mut row);
                row
            })
            .collect();
        let proj = Projector::with_fallback(&features, nf, cfg.degree, total_degree, cfg.rank_tol)?;
        let (done, todo) = phi.split_at_mut((k + 1) * stride);
        let next = &todo[..stride];
        let cur_phi = &mut done[k * stride..];

        let mean_next = proj.project(next, d);
        let targets: Vec<f64> =
            (0..stride).map(|i| (next[i] - mean_next.fitted[i]) * problem.innovation(i / d, k) / dt).collect();
        let lam = proj.project(&targets, d);
        lambda[k * stride..(k + 1) * stride].copy_from_slice(&lam.fitted);

        let targets: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|j| {
                let mut out = vec![0.0; d];
                problem.driver(j, k, &next[j * d..(j + 1) * d], &lam.fitted[j * d..(j + 1) * d], &mut out)?;
                Ok((0..d).map(|c| next[j * d + c] + out[c] * dt).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        let fit = proj.project(&targets, d);
        cur_phi[..stride].copy_from_slice(&fit.fitted);
        steps.push(StepDiagnostics { step: k, degree: proj.basis().degree(), r2_phi: fit.r2, r2_lambda: lam.r2 });
    }
    let (head, tail) = lambda.split_at_mut(n * stride);
    tail.copy_from_slice(&head[(n - 1) * stride..]);
    Ok(AdjointEnsemble { grid, n_paths: np, dim: d, degree: cfg.degree, phi, lambda, steps })
}

/// The adjoint equation of the compact system posed on an ensemble.
pub struct CompactBackward<'a> {
    pub cc: &'a CompactCoeffs,
    pub ensemble: &'a Ensemble,
}

impl BackwardProblem for CompactBackward<'_> {
    fn grid(&self) -> TimeGrid {
        self.ensemble.grid
    }

    fn n_paths(&self) -> usize {
        self.ensemble.len()
    }

    fn dim(&self) -> usize {
        2
    }

    fn n_features(&self) -> usize {
        2
    }

    fn features(&self, path: usize, k: usize, out: &mut [f64]) {
        out.copy_from_slice(&theta_at(&self.ensemble.paths[path], k));
    }

    fn innovation(&self, path: usize, k: usize) -> f64 {
        self.ensemble.paths[path].filter.nu[k]
    }

    fn terminal(&self, path: usize, out: &mut [f64]) {
        let n = self.ensemble.grid.n_steps();
        out.copy_from_slice(&self.cc.terminal(theta_at(&self.ensemble.paths[path], n)).g_theta);
    }

    fn driver(&self, path: usize, k: usize, phi_next: &[f64], lambda: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.ensemble.paths[path];
        let e = self.cc.eval(self.ensemble.grid.node(k), theta_at(p, k), p.bundle.u[k])?;
        out.copy_from_slice(&e.driver(phi_next, lambda));
        Ok(())
    }
}

/// Adjoint of the compact system along every path of `ensemble`.
pub fn solve_adjoint_bsde(cc: &CompactCoeffs, ensemble: &Ensemble, cfg: &BsdeConfig) -> Result<AdjointEnsemble> {
    solve_backward(&CompactBackward { cc, ensemble }, cfg)
}

/// `(Phi, Lambda) = ((p, k), (P, K))` along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub grid: TimeGrid,
    pub phi: Vec<Vec2>,
    pub lambda: Vec<Vec2>,
    /// Smallest R² of each backward step, in time order.
    pub r2: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdjointRow {
    t: f64,
    p: f64,
    k: f64,
    #[serde(rename = "P")]
    big_p: f64,
    #[serde(rename = "K")]
    big_k: f64,
}

impl AdjointPath {
    /// CSV with columns `t, p, k, P, K`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for (i, (phi, lam)) in self.phi.iter().zip(&self.lambda).enumerate() {
            wtr.serialize(AdjointRow { t: self.grid.node(i), p: phi[0], k: phi[1], big_p: lam[0], big_k: lam[1] })?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let rows: Vec<AdjointRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let grid = grid_from_times(rows.iter().map(|r| r.t))?;
        if rows.iter().any(|r| ![r.p, r.k, r.big_p, r.big_k].iter().all(|v| v.is_finite())) {
            return Err(Error::Parse("non-finite adjoint value".into()));
        }
        Ok(Self {
            grid,
            phi: rows.iter().map(|r| [r.p, r.k]).collect(),
            lambda: rows.iter().map(|r| [r.big_p, r.big_k]).collect(),
            r2: Vec::new(),
        })
    }
}

/// Equality and projected first-order residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    /// `sqrt(E int |H_v|^2 dt)`.
    pub residual: f64,
    /// Standard error of `residual` (delta method).
    pub std_error: f64,
    /// The same with `H_v` replaced by its violation of the variational
    /// inequality on `U`.
    pub projected_residual: f64,
}

fn projected(h: f64, u: f64, lo: f64, hi: f64) -> f64 {
    let scale = 1e-12 * (1.0 + u.abs());
    if u <= lo + scale {
        h.min(0.0)
    } else if u >= hi - scale {
        h.max(0.0)
    } else {
        h
    }
}

/// Stationarity residual of the control applied in `ensemble`.
pub fn stationarity_residual(
    cc: &CompactCoeffs,
    ensemble: &Ensemble,
    adjoint: &AdjointEnsemble,
) -> Result<Stationarity> {
    let grid = ensemble.grid;
    let dt = grid.dt();
    let dom = cc.spec.control_domain;
    let rows: Vec<(f64, f64)> = (0..ensemble.len())
        .into_par_iter()
        .map(|j| {
            let p = &ensemble.paths[j];
            let (mut eq, mut pr) = (0.0, 0.0);
            for k in 0..grid.n_steps() {
                let u = p.bundle.u[k];
                let e = cc.eval(grid.node(k), theta_at(p, k), u)?;
                let h = e.hamiltonian_v(adjoint.phi(k, j), adjoint.lambda(k, j));
                let hp = projected(h, u, dom.lo, dom.hi);
                eq += h * h * dt;
                pr += hp * hp * dt;
            }
            Ok((eq, pr))
        })
        .collect::<Result<_>>()?;
    let eq: Accumulator = rows.iter().map(|r| r.0).collect();
    let pr: Accumulator = rows.iter().map(|r| r.1).collect();
    let residual = eq.mean().max(0.0).sqrt();
    let std_error = if residual > 0.0 { eq.std_error() / (2.0 * residual) } else { 0.0 };
    Ok(Stationarity { residual, std_error, projected_residual: pr.mean().max(0.0).sqrt() })
}

/// JSON summary of a residual computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub residual: f64,
    pub projected_residual: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub basis_degree: u32,
    pub per_step_r2_min: f64,
}

impl ResidualReport {
    pub fn new(s: &Stationarity, adjoint: &AdjointEnsemble) -> Self {
        Self {
            residual: s.residual,
            projected_residual: s.projected_residual,
            std_error: s.std_error,
            n_paths: adjoint.n_paths,
            basis_degree: adjoint.degree,
            per_step_r2_min: adjoint.min_r2(),
        }
    }
}
