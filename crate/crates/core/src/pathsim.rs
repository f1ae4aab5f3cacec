//! Simulation of the hidden chain, the controlled state and Monte Carlo
//! estimates of the cost functional.
//!
//! The chain is sampled on the grid through the exact one-step transition
//! matrix, the state by Euler-Maruyama. All draws for a path come from its
//! own counter-based streams, so results do not depend on scheduling.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeedbackPolicy, Generator, ProblemSpec, Regime};
use crate::rng::{stream, StreamTag};
use crate::stats::Estimate;
use crate::wonham::{FilterConfig, KsTracker};

/// Uniform grid `t_k = k * T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Index of the node closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.n_steps)
    }

    /// Grid with `n_steps / factor` steps; `factor` must divide `n_steps`.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::Config(format!("cannot coarsen {} steps by {factor}", self.n_steps)));
        }
        Self::new(self.horizon, self.n_steps / factor)
    }
}

/// Samples the chain on `grid` starting from `alpha0`.
///
/// Requires `dt * max_i(-q_ii) < 0.5`.
pub fn simulate_chain<R: Rng + ?Sized>(
    gen: &Generator,
    alpha0: Regime,
    grid: &TimeGrid,
    rng: &mut R,
) -> Result<Vec<Regime>> {
    let dt = grid.dt();
    if gen.max_exit_rate() * dt >= 0.5 {
        return Err(Error::Config(format!("time step {dt} too coarse for exit rate {}", gen.max_exit_rate())));
    }
    let d = gen.dim();
    if alpha0.slot() >= d {
        return Err(Error::Config(format!("initial regime {alpha0} outside the chain")));
    }
    let p = gen.transition_matrix(dt);
    let mut path = Vec::with_capacity(grid.n_nodes());
    let mut state = alpha0.slot();
    path.push(alpha0);
    for _ in 0..grid.n_steps() {
        let u: f64 = rng.gen();
        let row = &p[state * d..(state + 1) * d];
        let mut acc = 0.0;
        let mut next = d - 1;
        for (j, &pj) in row.iter().enumerate() {
            acc += pj;
            if u < acc {
                next = j;
                break;
            }
        }
        state = next;
        path.push(Regime::from_slot(state));
    }
    Ok(path)
}

fn draw_from(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Exogenous randomness of one path: Brownian increments and the regime path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNoise {
    pub grid: TimeGrid,
    pub dw: Vec<f64>,
    pub alpha: Vec<Regime>,
    pub seed: u64,
    pub path_index: u64,
}

impl PathNoise {
    /// Draws path `path_index` of experiment `seed`: `alpha_0 ~ pi0`, the chain
    /// from its own stream and independent Brownian increments.
    pub fn draw(spec: &ProblemSpec, grid: &TimeGrid, seed: u64, path_index: u64) -> Result<Self> {
        let alpha0 = Regime::from_slot(draw_from(&spec.pi0, stream(seed, path_index, StreamTag::Initial).gen()));
        let alpha = simulate_chain(&spec.generator, alpha0, grid, &mut stream(seed, path_index, StreamTag::Chain))?;
        let sqrt_dt = grid.dt().sqrt();
        let mut rng = stream(seed, path_index, StreamTag::Brownian);
        let dw = (0..grid.n_steps())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * sqrt_dt
            })
            .collect();
        Ok(Self { grid: *grid, dw, alpha, seed, path_index })
    }

    pub fn from_parts(grid: TimeGrid, dw: Vec<f64>, alpha: Vec<Regime>) -> Result<Self> {
        if dw.len() != grid.n_steps() || alpha.len() != grid.n_nodes() {
            return Err(Error::Config("noise lengths do not match the grid".into()));
        }
        Ok(Self { grid, dw, alpha, seed: 0, path_index: 0 })
    }

    /// The same path seen on a grid `factor` times coarser: increments are
    /// summed and the chain is read at the coarse nodes.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let dw = self.dw.chunks_exact(factor).map(|c| c.iter().sum()).collect();
        let alpha = self.alpha.iter().step_by(factor).copied().collect();
        Ok(Self { grid, dw, alpha, seed: self.seed, path_index: self.path_index })
    }
}

/// One simulated path: Brownian motion, regimes, state and applied control on
/// every node.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub w: Vec<f64>,
    pub alpha: Vec<Regime>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub seed: u64,
    pub path_index: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleRow {
    t: f64,
    #[serde(rename = "W")]
    w: f64,
    alpha: usize,
    #[serde(rename = "X")]
    x: f64,
    u: f64,
}

impl PathBundle {
    /// CSV with columns `t, W, alpha, X, u` (alpha one-based).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for k in 0..self.grid.n_nodes() {
            wtr.serialize(BundleRow {
                t: self.grid.node(k),
                w: self.w[k],
                alpha: self.alpha[k].index(),
                x: self.x[k],
                u: self.u[k],
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`PathBundle::write_csv`]. The grid is
    /// rebuilt from the row count and final time, and must be uniform.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let rows: Vec<BundleRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let grid = grid_from_times(rows.iter().map(|r| r.t))?;
        let mut alpha = Vec::with_capacity(rows.len());
        for r in &rows {
            if r.alpha == 0 || r.alpha > u8::MAX as usize {
                return Err(Error::Parse(format!("alpha label {} out of range", r.alpha)));
            }
            if !(r.w.is_finite() && r.x.is_finite() && r.u.is_finite()) {
                return Err(Error::Parse("non-finite value in path bundle".into()));
            }
            alpha.push(Regime::from_slot(r.alpha - 1));
        }
        Ok(Self {
            grid,
            w: rows.iter().map(|r| r.w).collect(),
            alpha,
            x: rows.iter().map(|r| r.x).collect(),
            u: rows.iter().map(|r| r.u).collect(),
            seed: 0,
            path_index: 0,
        })
    }
}

/// Rebuilds a uniform grid from a column of node times starting at zero.
pub(crate) fn grid_from_times(times: impl Iterator<Item = f64>) -> Result<TimeGrid> {
    let ts: Vec<f64> = times.collect();
    if ts.len() < 2 {
        return Err(Error::Parse("need at least two rows".into()));
    }
    let n = ts.len() - 1;
    let horizon = ts[n];
    let grid = TimeGrid::new(horizon, n).map_err(|e| Error::Parse(e.to_string()))?;
    for (k, &t) in ts.iter().enumerate() {
        if !((t - grid.node(k)).abs() <= 1e-9 * horizon.max(1.0)) {
            return Err(Error::Parse(format!("row {k} has time {t}, grid is not uniform from zero")));
        }
    }
    Ok(grid)
}

/// Source of the belief `pi_k` that feeds the policy while a path is simulated.
pub trait BeliefSource {
    /// Current `P(alpha = 1)` estimate.
    fn belief(&self) -> f64;
    /// Incorporates step `k`: state `x` at `t_k`, control `u`, increment `dx`.
    fn observe(&mut self, spec: &ProblemSpec, k: usize, t: f64, x: f64, u: f64, dx: f64, dt: f64) -> Result<()>;
}

/// Belief that ignores observations and follows the prior marginal law.
#[derive(Debug, Clone)]
pub struct PriorBelief {
    probs: Vec<f64>,
}

impl PriorBelief {
    pub fn new(spec: &ProblemSpec) -> Self {
        Self { probs: spec.pi0.clone() }
    }
}

impl BeliefSource for PriorBelief {
    fn belief(&self) -> f64 {
        self.probs[0]
    }

    fn observe(&mut self, spec: &ProblemSpec, _k: usize, _t: f64, _x: f64, _u: f64, _dx: f64, dt: f64) -> Result<()> {
        self.probs = spec.generator.marginal(&self.probs, dt);
        Ok(())
    }
}

/// Simulation limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// `|X|` above which the path is declared blown up.
    pub blow_up: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { blow_up: 1e8 }
    }
}

/// Euler-Maruyama path of the state under `policy`, with `pi_k` supplied by
/// `belief`.
pub fn simulate_with(
    spec: &ProblemSpec,
    policy: &FeedbackPolicy,
    noise: &PathNoise,
    belief: &mut dyn BeliefSource,
    cfg: &SimConfig,
) -> Result<PathBundle> {
    let grid = noise.grid;
    let dt = grid.dt();
    let n = grid.n_steps();
    let c = spec.coefficients.as_ref();
    let mut x = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n + 1);
    let mut w = Vec::with_capacity(n + 1);
    let mut xk = spec.x0;
    let mut wk = 0.0;
    for k in 0..n {
        let t = grid.node(k);
        let uk = policy.evaluate(t, xk, belief.belief());
        let sigma = spec.volatility(t, xk, uk)?;
        let dx = c.drift(t, xk, noise.alpha[k], uk) * dt + sigma * noise.dw[k];
        x.push(xk);
        u.push(uk);
        w.push(wk);
        belief.observe(spec, k, t, xk, uk, dx, dt)?;
        xk += dx;
        wk += noise.dw[k];
        if !(xk.abs() <= cfg.blow_up) {
            return Err(Error::Numerical(format!("state {xk} exceeded blow-up bound at step {}", k + 1)));
        }
    }
    x.push(xk);
    u.push(policy.evaluate(grid.horizon(), xk, belief.belief()));
    w.push(wk);
    Ok(PathBundle { grid, w, alpha: noise.alpha.clone(), x, u, seed: noise.seed, path_index: noise.path_index })
}

/// Path 0 of experiment `seed`, with the policy fed by the prior belief.
/// Policies that depend on `pi` are normally run through
/// [`crate::wonham::coupled_forward`] instead.
pub fn simulate_state(spec: &ProblemSpec, policy: &FeedbackPolicy, grid: &TimeGrid, seed: u64) -> Result<PathBundle> {
    let noise = PathNoise::draw(spec, grid, seed, 0)?;
    simulate_with(spec, policy, &noise, &mut PriorBelief::new(spec), &SimConfig::default())
}

/// Realised cost of one path: left-endpoint sum of the running cost plus the
/// terminal cost in the realised regime.
pub fn path_cost(spec: &ProblemSpec, bundle: &PathBundle) -> f64 {
    let c = spec.coefficients.as_ref();
    let grid = bundle.grid;
    let dt = grid.dt();
    let n = grid.n_steps();
    let running: f64 =
        (0..n).map(|k| c.running_cost(grid.node(k), bundle.x[k], bundle.alpha[k], bundle.u[k])).sum::<f64>() * dt;
    running + c.terminal_cost(bundle.x[n], bundle.alpha[n])
}

/// Maps `0..n_paths` in parallel, preserving index order in the output.
pub fn par_paths<T, F>(n_paths: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..n_paths as u64).into_par_iter().map(f).collect()
}

/// Monte Carlo estimate of the cost functional under `policy`; the policy
/// sees the normalised filter.
pub fn estimate_cost(
    spec: &ProblemSpec,
    policy: &FeedbackPolicy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_paths < 2 {
        return Err(Error::Config("estimate_cost needs at least two paths".into()));
    }
    let costs = par_paths(n_paths, |j| cost_on_noise(spec, policy, &PathNoise::draw(spec, grid, seed, j)?))?;
    Ok(Estimate::from_samples(&costs))
}

/// Realised cost of the path driven by `noise`, with the policy fed by the
/// normalised filter.
pub fn cost_on_noise(spec: &ProblemSpec, policy: &FeedbackPolicy, noise: &PathNoise) -> Result<f64> {
    let mut tracker = KsTracker::new(spec, &noise.grid, FilterConfig::default());
    let bundle = simulate_with(spec, policy, noise, &mut tracker, &SimConfig::default())?;
    Ok(path_cost(spec, &bundle))
}

/// Experiment summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl CostReport {
    pub fn new(estimate: &Estimate, grid: &TimeGrid, seed: u64) -> Self {
        Self { mean: estimate.mean, std_error: estimate.std_error, n_paths: estimate.n, n_steps: grid.n_steps(), seed }
    }
}
