//! Nonlinear filtering of the hidden regime from the observed state.
//!
//! The filter state is the vector of conditional regime probabilities
//! `pi_t(i) = P(alpha_t = i | F^X_t)`; any functional `mu_t(phi)` is then
//! `sum_i phi(i) pi_t(i)`. Each step is an Euler step of
//!
//! ```text
//! d pi(i) = (Q^T pi)(i) dt + pi(i) (h_i - hbar) dnu,   dnu = dY - hbar dt,
//! ```
//!
//! with `h_i = b(t, x, i, v) / sigma(t, x, v)` and `hbar = sum_i pi(i) h_i`,
//! followed by a projection back onto the simplex. The unnormalised (Zakai)
//! recursion `dV(i) = (Q^T V)(i) dt + V(i) h_i dY` and an exact discrete-time
//! Bayes recursion are provided as independent routes to the same object.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eval_h, FeedbackPolicy, Generator, ProblemSpec, Regime};
use crate::pathsim::{
    grid_from_times, par_paths, simulate_with, BeliefSource, PathBundle, PathNoise, SimConfig, TimeGrid,
};
use crate::stats::Estimate;

/// A function `phi` on the regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterFunctional(pub Vec<f64>);

impl FilterFunctional {
    /// Indicator of `regime` among `d` states.
    pub fn indicator(regime: Regime, d: usize) -> Self {
        let mut v = vec![0.0; d];
        v[regime.slot()] = 1.0;
        Self(v)
    }

    pub fn constant(value: f64, d: usize) -> Self {
        Self(vec![value; d])
    }

    /// `sum_i phi(i) w(i)` for a (possibly unnormalised) weight vector.
    pub fn pair(&self, weights: &[f64]) -> f64 {
        self.0.iter().zip(weights).map(|(p, w)| p * w).sum()
    }
}

/// `(Q phi)(i) = sum_{j != i} q_ij (phi(j) - phi(i))`.
pub fn apply_generator(gen: &Generator, phi: &FilterFunctional) -> Result<FilterFunctional> {
    let d = gen.dim();
    if phi.0.len() != d {
        return Err(Error::Config(format!("functional has {} entries, chain has {d} states", phi.0.len())));
    }
    Ok(FilterFunctional(
        (0..d).map(|i| (0..d).filter(|&j| j != i).map(|j| gen.rate(i, j) * (phi.0[j] - phi.0[i])).sum()).collect(),
    ))
}

/// Observation increments `dY_k = (X_{k+1} - X_k) / sigma(t_k, X_k, u_k)`.
pub fn observation_increments(bundle: &PathBundle, spec: &ProblemSpec) -> Result<Vec<f64>> {
    let grid = bundle.grid;
    (0..grid.n_steps())
        .map(|k| {
            let s = spec.volatility(grid.node(k), bundle.x[k], bundle.u[k])?;
            Ok((bundle.x[k + 1] - bundle.x[k]) / s)
        })
        .collect()
}

/// What to do when an Euler step leaves the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExcursionPolicy {
    /// Clip to `[0, 1]`, renormalise and record the repair.
    Repair,
    /// Fail with a numerical error once the excursion exceeds the tolerance.
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Excursions beyond `[-tolerance, 1 + tolerance]` count as clamp events.
    pub tolerance: f64,
    pub on_excursion: ExcursionPolicy,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { tolerance: 1e-6, on_excursion: ExcursionPolicy::Repair }
    }
}

impl FilterConfig {
    pub fn strict() -> Self {
        Self { on_excursion: ExcursionPolicy::Fail, ..Self::default() }
    }
}

/// Pre-clamp distance outside `[0, 1]` recorded for a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Repair {
    pub step: usize,
    pub excursion: f64,
}

/// A sequence of `d`-vectors, one per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSeries {
    d: usize,
    values: Vec<f64>,
}

impl BeliefSeries {
    fn with_capacity(d: usize, nodes: usize) -> Self {
        Self { d, values: Vec::with_capacity(d * nodes) }
    }

    fn push(&mut self, row: &[f64]) {
        self.values.extend_from_slice(row);
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    /// First component along the series (probability of regime 1).
    pub fn first(&self) -> Vec<f64> {
        self.values.iter().step_by(self.d).copied().collect()
    }

    /// `phi` paired with each row.
    pub fn functional(&self, phi: &FilterFunctional) -> Vec<f64> {
        (0..self.len()).map(|k| phi.pair(self.row(k))).collect()
    }

    /// `phi` paired with each row after dividing by the row total.
    pub fn normalized_functional(&self, phi: &FilterFunctional) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                let row = self.row(k);
                phi.pair(row) / row.iter().sum::<f64>()
            })
            .collect()
    }
}

fn check_prior(mu0: &[f64], d: usize) -> Result<()> {
    if mu0.len() != d || mu0.iter().any(|p| !(*p >= 0.0)) || (mu0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("initial filter {mu0:?} is not a probability vector of length {d}")));
    }
    Ok(())
}

fn regime_h(spec: &ProblemSpec, t: f64, x: f64, u: f64, h: &mut [f64]) -> Result<()> {
    for (i, hi) in h.iter_mut().enumerate() {
        *hi = eval_h(spec, t, x, Regime::from_slot(i), u)?;
    }
    Ok(())
}

/// One Euler step of the normalised filter, in place. Returns the innovation
/// increment and the pre-clamp excursion.
fn ks_step(gen: &Generator, pi: &mut [f64], h: &[f64], dy: f64, dt: f64, scratch: &mut [f64]) -> (f64, f64) {
    let d = pi.len();
    let hbar: f64 = pi.iter().zip(h).map(|(p, h)| p * h).sum();
    let dnu = dy - hbar * dt;
    for i in 0..d {
        let forward: f64 = (0..d).map(|j| pi[j] * gen.rate(j, i)).sum();
        scratch[i] = pi[i] + forward * dt + pi[i] * (h[i] - hbar) * dnu;
    }
    let mut excursion: f64 = 0.0;
    for &p in scratch.iter() {
        excursion = excursion.max(-p).max(p - 1.0);
    }
    let mut total = 0.0;
    for (p, &s) in pi.iter_mut().zip(scratch.iter()) {
        *p = s.clamp(0.0, 1.0);
        total += *p;
    }
    if total > 0.0 {
        for p in pi.iter_mut() {
            *p /= total;
        }
    } else {
        pi.iter_mut().for_each(|p| *p = 1.0 / d as f64);
    }
    (dnu, excursion.max(0.0))
}

fn handle_excursion(cfg: &FilterConfig, step: usize, excursion: f64, repairs: &mut Vec<Repair>) -> Result<()> {
    if excursion > cfg.tolerance && cfg.on_excursion == ExcursionPolicy::Fail {
        return Err(Error::Numerical(format!("filter left the simplex by {excursion:.3e} at step {step}")));
    }
    if excursion > 0.0 {
        log::trace!("filter repair at step {step}: excursion {excursion:.3e}");
        repairs.push(Repair { step, excursion });
    }
    Ok(())
}

/// Output of [`run_normalized_filter`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRun {
    /// Indicator filters `pi_k(i)` per node.
    pub beliefs: BeliefSeries,
    /// `mu_k(phi)` per node.
    pub functional: Vec<f64>,
    /// Innovation increments per step.
    pub nu: Vec<f64>,
    pub repairs: Vec<Repair>,
}

/// Runs the normalised filter along `bundle` (states and controls) driven by
/// the observation increments `dy`.
pub fn run_normalized_filter(
    spec: &ProblemSpec,
    bundle: &PathBundle,
    dy: &[f64],
    phi: &FilterFunctional,
    mu0: &[f64],
    cfg: &FilterConfig,
) -> Result<NormalizedRun> {
    let d = spec.n_regimes();
    check_prior(mu0, d)?;
    let grid = bundle.grid;
    if dy.len() != grid.n_steps() {
        return Err(Error::Config("observation increments do not match the grid".into()));
    }
    let dt = grid.dt();
    let mut pi = mu0.to_vec();
    let mut h = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut beliefs = BeliefSeries::with_capacity(d, grid.n_nodes());
    let mut nu = Vec::with_capacity(grid.n_steps());
    let mut repairs = Vec::new();
    beliefs.push(&pi);
    for k in 0..grid.n_steps() {
        regime_h(spec, grid.node(k), bundle.x[k], bundle.u[k], &mut h)?;
        let (dnu, excursion) = ks_step(&spec.generator, &mut pi, &h, dy[k], dt, &mut scratch);
        handle_excursion(cfg, k, excursion, &mut repairs)?;
        nu.push(dnu);
        beliefs.push(&pi);
    }
    let functional = beliefs.functional(phi);
    Ok(NormalizedRun { beliefs, functional, nu, repairs })
}

/// Runs the unnormalised filter `V_k(1_i)` driven by `dy`, with `V_0 = mu0`.
pub fn run_zakai_filter(spec: &ProblemSpec, bundle: &PathBundle, dy: &[f64], mu0: &[f64]) -> Result<BeliefSeries> {
    let d = spec.n_regimes();
    check_prior(mu0, d)?;
    let grid = bundle.grid;
    if dy.len() != grid.n_steps() {
        return Err(Error::Config("observation increments do not match the grid".into()));
    }
    let gen = &spec.generator;
    let dt = grid.dt();
    let mut v = mu0.to_vec();
    let mut next = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut out = BeliefSeries::with_capacity(d, grid.n_nodes());
    out.push(&v);
    for k in 0..grid.n_steps() {
        regime_h(spec, grid.node(k), bundle.x[k], bundle.u[k], &mut h)?;
        for i in 0..d {
            let forward: f64 = (0..d).map(|j| v[j] * gen.rate(j, i)).sum();
            next[i] = v[i] + forward * dt + v[i] * h[i] * dy[k];
        }
        std::mem::swap(&mut v, &mut next);
        let total: f64 = v.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Numerical(format!("unnormalised filter mass {total} at step {}", k + 1)));
        }
        out.push(&v);
    }
    Ok(out)
}

/// Exact forward recursion of the time-discretised hidden Markov model:
/// the step-`k` increment has law `N(b(t_k, X_k, i, u_k) dt, sigma^2 dt)`
/// given regime `i`, and the chain moves by `exp(Q dt)` between nodes.
pub fn discrete_bayes_oracle(bundle: &PathBundle, spec: &ProblemSpec) -> Result<BeliefSeries> {
    let d = spec.n_regimes();
    let grid = bundle.grid;
    let dt = grid.dt();
    let p = spec.generator.transition_matrix(dt);
    let c = spec.coefficients.as_ref();
    let mut post = spec.pi0.clone();
    let mut logw = vec![0.0; d];
    let mut out = BeliefSeries::with_capacity(d, grid.n_nodes());
    out.push(&post);
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let (x, u) = (bundle.x[k], bundle.u[k]);
        let s = spec.volatility(t, x, u)?;
        let dx = bundle.x[k + 1] - x;
        let var = s * s * dt;
        for (i, lw) in logw.iter_mut().enumerate() {
            let mean = c.drift(t, x, Regime::from_slot(i), u) * dt;
            *lw = if post[i] > 0.0 { post[i].ln() - (dx - mean).powi(2) / (2.0 * var) } else { f64::NEG_INFINITY };
        }
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::Numerical(format!("zero total likelihood at step {k}")));
        }
        let weights: Vec<f64> = logw.iter().map(|lw| (lw - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        for j in 0..d {
            post[j] = (0..d).map(|i| weights[i] / total * p[i * d + j]).sum();
        }
        out.push(&post);
    }
    Ok(out)
}

/// Filter output along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPath {
    pub grid: TimeGrid,
    /// Indicator filters per node.
    pub beliefs: BeliefSeries,
    /// Innovation increment per step.
    pub nu: Vec<f64>,
    pub repairs: Vec<Repair>,
    /// Unnormalised filter per node, when it was run alongside.
    pub zakai: Option<BeliefSeries>,
}

/// Diagnostic summary of a filter run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    pub clamp_count: usize,
    pub max_excursion: f64,
    pub qv_of_innovation: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FilterRow {
    t: f64,
    pi: f64,
    nu_increment: Option<f64>,
    #[serde(rename = "V1")]
    v1: Option<f64>,
    #[serde(rename = "V2")]
    v2: Option<f64>,
}

impl FilterPath {
    /// `P(alpha_k = 1 | F^X_k)`.
    pub fn pi(&self, k: usize) -> f64 {
        self.beliefs.row(k)[0]
    }

    pub fn pi_series(&self) -> Vec<f64> {
        self.beliefs.first()
    }

    /// Realised quadratic variation of the innovation on `[0, T]`.
    pub fn innovation_qv(&self) -> f64 {
        self.nu.iter().map(|d| d * d).sum()
    }

    /// Number of repairs whose excursion exceeded `threshold`.
    pub fn excursions_beyond(&self, threshold: f64) -> usize {
        self.repairs.iter().filter(|r| r.excursion > threshold).count()
    }

    pub fn diagnostics(&self, cfg: &FilterConfig) -> FilterDiagnostics {
        FilterDiagnostics {
            clamp_count: self.excursions_beyond(cfg.tolerance),
            max_excursion: self.repairs.iter().map(|r| r.excursion).fold(0.0, f64::max),
            qv_of_innovation: self.innovation_qv(),
        }
    }

    /// CSV with columns `t, pi, nu_increment, V1, V2`. The last row has no
    /// innovation increment; V columns are empty without an unnormalised run.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for k in 0..self.grid.n_nodes() {
            let z = self.zakai.as_ref().map(|z| z.row(k));
            wtr.serialize(FilterRow {
                t: self.grid.node(k),
                pi: self.pi(k),
                nu_increment: self.nu.get(k).copied(),
                v1: z.and_then(|r| r.first().copied()),
                v2: z.and_then(|r| r.get(1).copied()),
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a two-state filter path from the CSV layout of [`FilterPath::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let rows: Vec<FilterRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let grid = grid_from_times(rows.iter().map(|r| r.t))?;
        let n = grid.n_steps();
        let mut beliefs = BeliefSeries::with_capacity(2, rows.len());
        let mut nu = Vec::with_capacity(n);
        for (k, r) in rows.iter().enumerate() {
            if !(0.0..=1.0).contains(&r.pi) {
                return Err(Error::Parse(format!("pi {} at row {k} outside [0, 1]", r.pi)));
            }
            beliefs.push(&[r.pi, 1.0 - r.pi]);
            match (k < n, r.nu_increment) {
                (true, Some(d)) if d.is_finite() => nu.push(d),
                (true, _) => return Err(Error::Parse(format!("missing innovation increment at row {k}"))),
                (false, Some(_)) => return Err(Error::Parse("terminal row carries an innovation increment".into())),
                (false, None) => {}
            }
        }
        let has_v = rows.iter().all(|r| r.v1.is_some() && r.v2.is_some());
        let zakai = if has_v {
            let mut z = BeliefSeries::with_capacity(2, rows.len());
            for r in &rows {
                z.push(&[r.v1.unwrap_or_default(), r.v2.unwrap_or_default()]);
            }
            Some(z)
        } else if rows.iter().any(|r| r.v1.is_some() || r.v2.is_some()) {
            return Err(Error::Parse("V columns are only partially filled".into()));
        } else {
            None
        };
        Ok(Self { grid, beliefs, nu, repairs: Vec::new(), zakai })
    }
}

/// Normalised filter run online while a path is simulated, so that the
/// policy can read `pi_k`.
#[derive(Debug, Clone)]
pub struct KsTracker {
    cfg: FilterConfig,
    pi: Vec<f64>,
    h: Vec<f64>,
    scratch: Vec<f64>,
    zakai: Option<(Vec<f64>, Vec<f64>)>,
    beliefs: BeliefSeries,
    zakai_series: Option<BeliefSeries>,
    nu: Vec<f64>,
    repairs: Vec<Repair>,
}

impl KsTracker {
    pub fn new(spec: &ProblemSpec, grid: &TimeGrid, cfg: FilterConfig) -> Self {
        let d = spec.n_regimes();
        let mut beliefs = BeliefSeries::with_capacity(d, grid.n_nodes());
        beliefs.push(&spec.pi0);
        Self {
            cfg,
            pi: spec.pi0.clone(),
            h: vec![0.0; d],
            scratch: vec![0.0; d],
            zakai: None,
            beliefs,
            zakai_series: None,
            nu: Vec::with_capacity(grid.n_steps()),
            repairs: Vec::new(),
        }
    }

    /// Also propagates the unnormalised filter on the same observations.
    pub fn with_zakai(mut self, grid: &TimeGrid) -> Self {
        let d = self.pi.len();
        let mut series = BeliefSeries::with_capacity(d, grid.n_nodes());
        series.push(&self.pi);
        self.zakai = Some((self.pi.clone(), vec![0.0; d]));
        self.zakai_series = Some(series);
        self
    }

    pub fn finish(self, grid: TimeGrid) -> FilterPath {
        FilterPath { grid, beliefs: self.beliefs, nu: self.nu, repairs: self.repairs, zakai: self.zakai_series }
    }
}

impl BeliefSource for KsTracker {
    fn belief(&self) -> f64 {
        self.pi[0]
    }

    fn observe(&mut self, spec: &ProblemSpec, k: usize, t: f64, x: f64, u: f64, dx: f64, dt: f64) -> Result<()> {
        let sigma = spec.volatility(t, x, u)?;
        regime_h(spec, t, x, u, &mut self.h)?;
        let dy = dx / sigma;
        let (dnu, excursion) = ks_step(&spec.generator, &mut self.pi, &self.h, dy, dt, &mut self.scratch);
        handle_excursion(&self.cfg, k, excursion, &mut self.repairs)?;
        self.nu.push(dnu);
        self.beliefs.push(&self.pi);
        if let (Some((v, next)), Some(series)) = (self.zakai.as_mut(), self.zakai_series.as_mut()) {
            let gen = &spec.generator;
            let d = v.len();
            for i in 0..d {
                let forward: f64 = (0..d).map(|j| v[j] * gen.rate(j, i)).sum();
                next[i] = v[i] + forward * dt + v[i] * self.h[i] * dy;
            }
            std::mem::swap(v, next);
            let total: f64 = v.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::Numerical(format!("unnormalised filter mass {total} at step {}", k + 1)));
            }
            series.push(v);
        }
        Ok(())
    }
}

/// A simulated path together with its filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPath {
    pub bundle: PathBundle,
    pub filter: FilterPath,
}

/// Simulates the chain and the state while running the filter, feeding
/// `u_k = policy(t_k, X_k, pi_k)` into both.
pub fn coupled_forward_noise(
    spec: &ProblemSpec,
    policy: &FeedbackPolicy,
    noise: &PathNoise,
    cfg: &FilterConfig,
    with_zakai: bool,
) -> Result<ObservedPath> {
    let mut tracker = KsTracker::new(spec, &noise.grid, *cfg);
    if with_zakai {
        tracker = tracker.with_zakai(&noise.grid);
    }
    let bundle = simulate_with(spec, policy, noise, &mut tracker, &SimConfig::default())?;
    Ok(ObservedPath { bundle, filter: tracker.finish(noise.grid) })
}

/// Path `path_index` of experiment `seed` simulated jointly with its filter.
pub fn coupled_forward(
    spec: &ProblemSpec,
    policy: &FeedbackPolicy,
    grid: &TimeGrid,
    seed: u64,
    path_index: u64,
) -> Result<ObservedPath> {
    let noise = PathNoise::draw(spec, grid, seed, path_index)?;
    coupled_forward_noise(spec, policy, &noise, &FilterConfig::default(), false)
}

/// `n_paths` coupled paths simulated under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub seed: u64,
    pub paths: Vec<ObservedPath>,
}

impl Ensemble {
    pub fn simulate(
        spec: &ProblemSpec,
        policy: &FeedbackPolicy,
        grid: &TimeGrid,
        n_paths: usize,
        seed: u64,
    ) -> Result<Self> {
        let paths = par_paths(n_paths, |j| coupled_forward(spec, policy, grid, seed, j))?;
        Ok(Self { grid: *grid, seed, paths })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Cost of one path in the filtered form: running and terminal costs
/// weighted by the filter instead of evaluated in the hidden regime.
pub fn path_transformed_cost(spec: &ProblemSpec, path: &ObservedPath) -> f64 {
    let c = spec.coefficients.as_ref();
    let b = &path.bundle;
    let grid = b.grid;
    let n = grid.n_steps();
    let weighted = |k: usize, f: &dyn Fn(Regime) -> f64| -> f64 {
        path.filter.beliefs.row(k).iter().enumerate().map(|(i, p)| p * f(Regime::from_slot(i))).sum()
    };
    let running: f64 = (0..n)
        .map(|k| {
            let t = grid.node(k);
            weighted(k, &|i| c.running_cost(t, b.x[k], i, b.u[k]))
        })
        .sum::<f64>()
        * grid.dt();
    running + weighted(n, &|i| c.terminal_cost(b.x[n], i))
}

/// Monte Carlo estimate of the filtered cost functional.
pub fn transformed_cost(spec: &ProblemSpec, paths: &[ObservedPath]) -> Result<Estimate> {
    if paths.len() < 2 {
        return Err(Error::Config("transformed_cost needs at least two paths".into()));
    }
    let costs: Vec<f64> = paths.iter().map(|p| path_transformed_cost(spec, p)).collect();
    Ok(Estimate::from_samples(&costs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lq::LqSpec;
    use crate::model::{ControlDomain, FnCoefficients};
    use crate::pathsim::path_cost;
    use std::sync::Arc;

    fn no_information_spec(rates: (f64, f64), pi0: f64) -> ProblemSpec {
        let c = FnCoefficients::new(|_, x, _, _| -x, |_, _, _| 1.0, |_, x, _, _| x * x, |_, _| 0.0);
        ProblemSpec::new(1.0, 0.5, vec![pi0, 1.0 - pi0], Generator::two_state(rates.0, rates.1).unwrap(), Arc::new(c))
            .unwrap()
    }

    fn zero_policy() -> FeedbackPolicy {
        FeedbackPolicy::constant(ControlDomain::REAL_LINE, 0.0)
    }

    #[test]
    fn generator_annihilates_constants() {
        let g = Generator::two_state(1.5, 0.2).unwrap();
        let q = apply_generator(&g, &FilterFunctional::constant(3.0, 2)).unwrap();
        assert_eq!(q.0, vec![0.0, 0.0]);
    }

    #[test]
    fn generator_on_indicators() {
        let g = Generator::two_state(1.0, 2.0).unwrap();
        let q = apply_generator(&g, &FilterFunctional(vec![1.0, 0.0])).unwrap();
        assert_eq!(q.0, vec![-1.0, 2.0]);
        let g = Generator::two_state(3.0, 5.0).unwrap();
        let q = apply_generator(&g, &FilterFunctional(vec![0.0, 1.0])).unwrap();
        assert_eq!(q.0, vec![3.0, -5.0]);
    }

    #[test]
    fn unit_volatility_observations_are_state_increments() {
        let spec = LqSpec { sigma: 1.0, ..LqSpec::default() }.problem().unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let b = crate::pathsim::simulate_state(&spec, &FeedbackPolicy::linear(ControlDomain::REAL_LINE, 1.0), &grid, 4)
            .unwrap();
        let dy = observation_increments(&b, &spec).unwrap();
        for k in 0..50 {
            assert_eq!(dy[k], b.x[k + 1] - b.x[k]);
        }
    }

    #[test]
    fn observation_scaling() {
        let c = FnCoefficients::new(|_, _, _, _| 0.0, |_, _, _| 2.0, |_, _, _, _| 0.0, |_, _| 0.0);
        let spec =
            ProblemSpec::new(1.0, 0.0, vec![1.0, 0.0], Generator::two_state(1.0, 1.0).unwrap(), Arc::new(c)).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let b = PathBundle {
            grid,
            w: vec![0.0; 3],
            alpha: vec![Regime::FIRST; 3],
            x: vec![0.0, 0.5, 0.5],
            u: vec![0.0; 3],
            seed: 0,
            path_index: 0,
        };
        assert_eq!(observation_increments(&b, &spec).unwrap(), vec![0.25, 0.0]);
    }

    #[test]
    fn observation_sums_to_brownian_motion_without_drift() {
        let c = FnCoefficients::new(|_, _, _, _| 0.0, |_, _, _| 1.0, |_, _, _, _| 0.0, |_, _| 0.0);
        let spec =
            ProblemSpec::new(1.0, 0.0, vec![0.5, 0.5], Generator::two_state(1.0, 1.0).unwrap(), Arc::new(c)).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let b = crate::pathsim::simulate_state(&spec, &zero_policy(), &grid, 8).unwrap();
        let y: f64 = observation_increments(&b, &spec).unwrap().iter().sum();
        assert!((y - b.w[100]).abs() < 1e-12);
    }

    #[test]
    fn uninformative_filter_follows_forward_equation() {
        let spec = no_information_spec((1.0, 1.0), 1.0);
        let grid = TimeGrid::new(0.5, 500).unwrap();
        let b = crate::pathsim::simulate_state(&spec, &zero_policy(), &grid, 2).unwrap();
        let dy = observation_increments(&b, &spec).unwrap();
        let run = run_normalized_filter(
            &spec,
            &b,
            &dy,
            &FilterFunctional::indicator(Regime::FIRST, 2),
            &spec.pi0,
            &FilterConfig::default(),
        )
        .unwrap();
        let expected = 0.5 + 0.5 * (-1.0f64).exp();
        assert!((expected - 0.683_940).abs() < 1e-6);
        assert!((run.functional[500] - expected).abs() <= 10.0 * grid.dt());
    }

    #[test]
    fn symmetric_fixed_point() {
        let spec = no_information_spec((0.7, 0.7), 0.5);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let b = crate::pathsim::simulate_state(&spec, &zero_policy(), &grid, 2).unwrap();
        let dy = observation_increments(&b, &spec).unwrap();
        let run = run_normalized_filter(
            &spec,
            &b,
            &dy,
            &FilterFunctional::indicator(Regime::FIRST, 2),
            &spec.pi0,
            &FilterConfig::default(),
        )
        .unwrap();
        assert!(run.functional.iter().all(|p| (p - 0.5).abs() < 1e-14));
    }

    #[test]
    fn boundary_is_pushed_back_into_the_simplex() {
        let spec = LqSpec { lambda2: 2.0, pi0: 0.0, ..LqSpec::default() }.problem().unwrap();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let b = crate::pathsim::simulate_state(&spec, &zero_policy(), &grid, 2).unwrap();
        let dy = observation_increments(&b, &spec).unwrap();
        let run = run_normalized_filter(
            &spec,
            &b,
            &dy,
            &FilterFunctional::indicator(Regime::FIRST, 2),
            &spec.pi0,
            &FilterConfig::default(),
        )
        .unwrap();
        assert!((run.functional[1] - 2.0 * grid.dt()).abs() < 1e-15);
    }

    #[test]
    fn strict_mode_rejects_simplex_excursions() {
        // Very coarse steps with a strongly informative drift.
        let c = FnCoefficients::new(
            |_, _, i, _| if i == Regime::FIRST { 40.0 } else { -40.0 },
            |_, _, _| 1.0,
            |_, _, _, _| 0.0,
            |_, _| 0.0,
        );
        let spec =
            ProblemSpec::new(1.0, 0.0, vec![0.5, 0.5], Generator::two_state(0.1, 0.1).unwrap(), Arc::new(c)).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let b = crate::pathsim::simulate_state(&spec, &zero_policy(), &grid, 2).unwrap();
        let dy = observation_increments(&b, &spec).unwrap();
        let phi = FilterFunctional::indicator(Regime::FIRST, 2);
        let repaired = run_normalized_filter(&spec, &b, &dy, &phi, &spec.pi0, &FilterConfig::default()).unwrap();
        assert!(!repaired.repairs.is_empty());
        assert!(repaired.beliefs.first().iter().all(|p| (0.0..=1.0).contains(p)));
        let strict = run_normalized_filter(&spec, &b, &dy, &phi, &spec.pi0, &FilterConfig::strict());
        assert!(matches!(strict, Err(Error::Numerical(_))));
    }

    #[test]
    fn zakai_without_observation_coupling_is_forward_equation() {
        let c = FnCoefficients::new(|_, _, _, _| 0.0, |_, _, _| 1.0, |_, _, _, _| 0.0, |_, _| 0.0);
        let spec =
            ProblemSpec::new(1.0, 0.0, vec![1.0, 0.0], Generator::two_state(1.0, 3.0).unwrap(), Arc::new(c)).unwrap();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let b = crate::pathsim::simulate_state(&spec, &zero_policy(), &grid, 5).unwrap();
        let dy = observation_increments(&b, &spec).unwrap();
        let v = run_zakai_filter(&spec, &b, &dy, &spec.pi0).unwrap();
        let dt = grid.dt();
        let mut p = 1.0;
        for k in 0..=200 {
            let row = v.row(k);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!((row[0] - p).abs() < 1e-12);
            p += (3.0 * (1.0 - p) - p) * dt;
        }
        let ones = FilterFunctional::constant(1.0, 2);
        let total: Vec<f64> = (0..v.len()).map(|k| v.row(k).iter().sum()).collect();
        assert_eq!(v.functional(&ones), total);
    }

    #[test]
    fn zakai_and_normalized_agree_to_discretisation_error() {
        let spec = LqSpec::default().problem().unwrap();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let policy = FeedbackPolicy::linear(ControlDomain::REAL_LINE, 1.0);
        let path = coupled_forward(&spec, &policy, &grid, 3, 0).unwrap();
        let dy = observation_increments(&path.bundle, &spec).unwrap();
        let phi = FilterFunctional::indicator(Regime::FIRST, 2);
        let ks = run_normalized_filter(&spec, &path.bundle, &dy, &phi, &spec.pi0, &FilterConfig::default()).unwrap();
        let z = run_zakai_filter(&spec, &path.bundle, &dy, &spec.pi0).unwrap();
        let zn = z.normalized_functional(&phi);
        let gap = ks.functional.iter().zip(&zn).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 100.0 * grid.dt(), "gap {gap}");
        // The online tracker and the offline run see identical inputs.
        let online = path.filter.pi_series();
        assert!(ks.functional.iter().zip(&online).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn oracle_with_uninformative_likelihood_is_prior_marginal() {
        let c = FnCoefficients::new(|_, x, _, _| -x, |_, _, _| 1.0, |_, _, _, _| 0.0, |_, _| 0.0);
        let spec =
            ProblemSpec::new(1.0, 0.3, vec![0.9, 0.1], Generator::two_state(1.0, 2.0).unwrap(), Arc::new(c)).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let b = crate::pathsim::simulate_state(&spec, &zero_policy(), &grid, 5).unwrap();
        let post = discrete_bayes_oracle(&b, &spec).unwrap();
        for k in [0usize, 17, 100] {
            let m = spec.generator.marginal(&spec.pi0, grid.node(k));
            assert!((post.row(k)[0] - m[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_with_degenerate_prior_and_tiny_step() {
        let spec = LqSpec { pi0: 1.0, ..LqSpec::default() }.problem().unwrap();
        let grid = TimeGrid::new(1e-9, 1).unwrap();
        let b = PathBundle {
            grid,
            w: vec![0.0, 0.0],
            alpha: vec![Regime::FIRST; 2],
            x: vec![1.0, 1.7],
            u: vec![0.0; 2],
            seed: 0,
            path_index: 0,
        };
        let post = discrete_bayes_oracle(&b, &spec).unwrap();
        assert!((post.row(1)[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn conservation_of_the_indicator_vector() {
        let spec = LqSpec::default().problem().unwrap();
        let grid = TimeGrid::new(1.0, 500).unwrap();
        let policy = FeedbackPolicy::linear(ControlDomain::REAL_LINE, 1.0);
        for j in 0..20 {
            let path = coupled_forward(&spec, &policy, &grid, 12, j).unwrap();
            for k in 0..grid.n_nodes() {
                let row = path.filter.beliefs.row(k);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn regime_free_costs_match_realised_costs() {
        let c = FnCoefficients::new(|_, x, _, v| -x + v, |_, _, _| 0.5, |_, x, _, v| x * x + v * v, |x, _| x.abs());
        let spec =
            ProblemSpec::new(1.0, 1.0, vec![0.5, 0.5], Generator::two_state(1.0, 1.0).unwrap(), Arc::new(c)).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let policy = FeedbackPolicy::linear(ControlDomain::REAL_LINE, 0.5);
        for j in 0..5 {
            let p = coupled_forward(&spec, &policy, &grid, 1, j).unwrap();
            assert!((path_transformed_cost(&spec, &p) - path_cost(&spec, &p.bundle)).abs() < 1e-12);
        }
    }

    #[test]
    fn certain_filter_uses_first_regime_costs() {
        let spec = LqSpec { q1: 3.0, q2: 0.0, g1: 2.0, g2: 0.0, ..LqSpec::default() }.problem().unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut p = coupled_forward(&spec, &zero_policy(), &grid, 1, 0).unwrap();
        let mut beliefs = BeliefSeries::with_capacity(2, 11);
        for _ in 0..11 {
            beliefs.push(&[1.0, 0.0]);
        }
        p.filter.beliefs = beliefs;
        let c = spec.coefficients.as_ref();
        let b = &p.bundle;
        let expected: f64 = (0..10).map(|k| c.running_cost(grid.node(k), b.x[k], Regime::FIRST, b.u[k])).sum::<f64>()
            * grid.dt()
            + c.terminal_cost(b.x[10], Regime::FIRST);
        assert!((path_transformed_cost(&spec, &p) - expected).abs() < 1e-12);
    }

    #[test]
    fn filter_csv_round_trip() {
        let spec = LqSpec::default().problem().unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let noise = PathNoise::draw(&spec, &grid, 1, 0).unwrap();
        let path = coupled_forward_noise(&spec, &zero_policy(), &noise, &FilterConfig::default(), true).unwrap();
        let mut buf = Vec::new();
        path.filter.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t,pi,nu_increment,V1,V2\n"));
        let back = FilterPath::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.nu, path.filter.nu);
        assert_eq!(back.pi_series(), path.filter.pi_series());
        assert!(back.zakai.is_some());
    }
}
