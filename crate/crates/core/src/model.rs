//! Problem definition: coefficients, generator, control domain, admissible
//! feedback policies and the checkable standing assumptions.
//!
//! The state is scalar and driven by a scalar Brownian motion. The drift and
//! running cost may depend on the hidden regime; the volatility may not, so
//! the observation `dY = dX / sigma` carries regime information only through
//! its drift `h = b / sigma`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lq::LqSpec;

/// Finite-difference step used wherever partial derivatives of user
/// coefficients are needed.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// A regime of the hidden chain, stored zero-based and displayed one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Regime(u8);

impl Regime {
    pub const FIRST: Regime = Regime(0);
    pub const SECOND: Regime = Regime(1);

    /// Builds a regime from its one-based label `1..=d`.
    pub fn new(index: usize, d: usize) -> Result<Self> {
        if index == 0 || index > d || d > u8::MAX as usize {
            return Err(Error::Config(format!("regime index {index} outside 1..={d}")));
        }
        Ok(Regime((index - 1) as u8))
    }

    pub fn from_slot(slot: usize) -> Self {
        Regime(slot as u8)
    }

    /// One-based label.
    pub fn index(self) -> usize {
        self.0 as usize + 1
    }

    /// Zero-based position for indexing vectors.
    pub fn slot(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Generator (rate matrix) of the hidden chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    d: usize,
    rates: Vec<f64>,
}

impl Generator {
    /// Two-state generator `[[-l1, l1], [l2, -l2]]`. Zero rates are accepted
    /// here (degenerate chains are useful in tests); `validate_spec` does not
    /// reject them either.
    pub fn two_state(lambda1: f64, lambda2: f64) -> Result<Self> {
        Self::from_rows(vec![vec![-lambda1, lambda1], vec![lambda2, -lambda2]])
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        if d == 0 {
            return Err(Error::Config("generator must have at least one state".into()));
        }
        let mut rates = Vec::with_capacity(d * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Config(format!("generator row {i} has {} entries, expected {d}", row.len())));
            }
            let mut sum = 0.0;
            for (j, &q) in row.iter().enumerate() {
                if !q.is_finite() {
                    return Err(Error::Config(format!("generator entry ({i},{j}) is not finite")));
                }
                if i != j && q < 0.0 {
                    return Err(Error::Config(format!("negative off-diagonal rate at ({i},{j})")));
                }
                sum += q;
            }
            let scale = row.iter().map(|q| q.abs()).fold(1.0, f64::max);
            if sum.abs() > 1e-10 * scale {
                return Err(Error::Config(format!("generator row {i} sums to {sum}")));
            }
            rates.extend_from_slice(row);
        }
        Ok(Self { d, rates })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[i * self.d + j]
    }

    /// `(lambda1, lambda2)` of a two-state chain.
    pub fn two_state_rates(&self) -> Option<(f64, f64)> {
        (self.d == 2).then(|| (self.rate(0, 1), self.rate(1, 0)))
    }

    /// Largest exit rate `max_i -q_ii`.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.d).map(|i| -self.rate(i, i)).fold(0.0, f64::max)
    }

    /// Transition matrix `exp(Q dt)`, row-major. Closed form for two states.
    pub fn transition_matrix(&self, dt: f64) -> Vec<f64> {
        if let Some((l1, l2)) = self.two_state_rates() {
            let s = l1 + l2;
            if s == 0.0 {
                return vec![1.0, 0.0, 0.0, 1.0];
            }
            let e = (-s * dt).exp();
            let p11 = (l2 + l1 * e) / s;
            let p22 = (l1 + l2 * e) / s;
            return vec![p11, 1.0 - p11, 1.0 - p22, p22];
        }
        let q = DMatrix::from_row_slice(self.d, self.d, &self.rates) * dt;
        let p = q.exp();
        let mut out = Vec::with_capacity(self.d * self.d);
        for i in 0..self.d {
            for j in 0..self.d {
                out.push(p[(i, j)]);
            }
        }
        out
    }

    /// Marginal law at time `t` started from `p0`: `p0^T exp(Q t)`.
    pub fn marginal(&self, p0: &[f64], t: f64) -> Vec<f64> {
        let p = self.transition_matrix(t);
        (0..self.d).map(|j| (0..self.d).map(|i| p0[i] * p[i * self.d + j]).sum()).collect()
    }
}

/// Closed convex control domain `[lo, hi]`; infinite ends are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDomain {
    pub lo: f64,
    pub hi: f64,
}

impl ControlDomain {
    pub const REAL_LINE: ControlDomain = ControlDomain { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Config(format!("invalid control domain [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    /// Finite window used for sampling: the domain intersected with `[-r, r]`.
    pub fn window(&self, r: f64) -> (f64, f64) {
        (self.lo.max(-r), self.hi.min(r))
    }
}

/// Model coefficients. Implementations must be pure.
pub trait Coefficients: Send + Sync {
    /// Drift `b(t, x, i, v)`.
    fn drift(&self, t: f64, x: f64, regime: Regime, v: f64) -> f64;
    /// Volatility `sigma(t, x, v)`; regime-free by construction.
    fn volatility(&self, t: f64, x: f64, v: f64) -> f64;
    /// Running cost `f(t, x, i, v)`.
    fn running_cost(&self, t: f64, x: f64, regime: Regime, v: f64) -> f64;
    /// Terminal cost `g(x, i)`.
    fn terminal_cost(&self, x: f64, regime: Regime) -> f64;
}

type DriftFn = dyn Fn(f64, f64, Regime, f64) -> f64 + Send + Sync;
type VolFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(f64, Regime) -> f64 + Send + Sync;

/// Coefficients assembled from closures.
#[derive(Clone)]
pub struct FnCoefficients {
    drift: Arc<DriftFn>,
    volatility: Arc<VolFn>,
    running: Arc<DriftFn>,
    terminal: Arc<TerminalFn>,
}

impl FnCoefficients {
    pub fn new(
        drift: impl Fn(f64, f64, Regime, f64) -> f64 + Send + Sync + 'static,
        volatility: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        running: impl Fn(f64, f64, Regime, f64) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(f64, Regime) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            drift: Arc::new(drift),
            volatility: Arc::new(volatility),
            running: Arc::new(running),
            terminal: Arc::new(terminal),
        }
    }
}

impl Coefficients for FnCoefficients {
    fn drift(&self, t: f64, x: f64, regime: Regime, v: f64) -> f64 {
        (self.drift)(t, x, regime, v)
    }
    fn volatility(&self, t: f64, x: f64, v: f64) -> f64 {
        (self.volatility)(t, x, v)
    }
    fn running_cost(&self, t: f64, x: f64, regime: Regime, v: f64) -> f64 {
        (self.running)(t, x, regime, v)
    }
    fn terminal_cost(&self, x: f64, regime: Regime) -> f64 {
        (self.terminal)(x, regime)
    }
}

/// A partially observed control problem.
#[derive(Clone)]
pub struct ProblemSpec {
    pub horizon: f64,
    pub x0: f64,
    /// Prior law of the initial regime.
    pub pi0: Vec<f64>,
    pub generator: Generator,
    pub coefficients: Arc<dyn Coefficients>,
    pub control_domain: ControlDomain,
    pub lipschitz_bound: f64,
    /// Floor below which the volatility counts as degenerate.
    pub sigma_min: f64,
    lq: Option<LqSpec>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("pi0", &self.pi0)
            .field("generator", &self.generator)
            .field("control_domain", &self.control_domain)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .field("sigma_min", &self.sigma_min)
            .field("lq", &self.lq)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn new(
        horizon: f64,
        x0: f64,
        pi0: Vec<f64>,
        generator: Generator,
        coefficients: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if !x0.is_finite() {
            return Err(Error::Config("x0 must be finite".into()));
        }
        if pi0.len() != generator.dim() {
            return Err(Error::Config(format!(
                "prior has {} entries but the chain has {} states",
                pi0.len(),
                generator.dim()
            )));
        }
        if pi0.iter().any(|p| !(*p >= 0.0)) || (pi0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("prior {pi0:?} is not a probability vector")));
        }
        Ok(Self {
            horizon,
            x0,
            pi0,
            generator,
            coefficients,
            control_domain: ControlDomain::REAL_LINE,
            lipschitz_bound: 1e3,
            sigma_min: 1e-8,
            lq: None,
        })
    }

    pub fn with_control_domain(mut self, domain: ControlDomain) -> Self {
        self.control_domain = domain;
        self
    }

    pub fn with_lipschitz_bound(mut self, l: f64) -> Self {
        self.lipschitz_bound = l;
        self
    }

    pub fn with_sigma_min(mut self, s: f64) -> Self {
        self.sigma_min = s;
        self
    }

    pub(crate) fn with_lq_tag(mut self, lq: LqSpec) -> Self {
        self.lq = Some(lq);
        self
    }

    /// Constants of the linear-quadratic special case, when tagged.
    pub fn lq_tag(&self) -> Option<&LqSpec> {
        self.lq.as_ref()
    }

    pub fn n_regimes(&self) -> usize {
        self.generator.dim()
    }

    /// Volatility, with the lower bound enforced.
    pub fn volatility(&self, t: f64, x: f64, v: f64) -> Result<f64> {
        let s = self.coefficients.volatility(t, x, v);
        if !(s >= self.sigma_min) {
            return Err(Error::Domain(format!(
                "volatility {s} below floor {} at (t={t}, x={x}, v={v})",
                self.sigma_min
            )));
        }
        Ok(s)
    }

    /// Parses an LQ-tagged problem from its JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        LqSpec::from_json(text)?.problem()
    }

    /// Serialises the problem. Only LQ-tagged problems have a document form.
    pub fn to_json(&self) -> Result<String> {
        match &self.lq {
            Some(lq) => lq.to_json(),
            None => Err(Error::Config("only LQ-tagged problems can be serialised".into())),
        }
    }
}

/// Observation drift `h = b / sigma`.
pub fn eval_h(spec: &ProblemSpec, t: f64, x: f64, regime: Regime, v: f64) -> Result<f64> {
    let s = spec.volatility(t, x, v)?;
    Ok(spec.coefficients.drift(t, x, regime, v) / s)
}

type PolicyFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

/// An admissible closed-loop control `u(t, x, pi)` with `pi = P(alpha_t = 1 | observations)`.
/// Evaluation always lands in the control domain.
#[derive(Clone)]
pub struct FeedbackPolicy {
    rule: Arc<PolicyFn>,
    domain: ControlDomain,
    lipschitz: f64,
}

impl fmt::Debug for FeedbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackPolicy")
            .field("domain", &self.domain)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl FeedbackPolicy {
    pub fn new(
        domain: ControlDomain,
        lipschitz: f64,
        rule: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { rule: Arc::new(rule), domain, lipschitz }
    }

    pub fn constant(domain: ControlDomain, value: f64) -> Self {
        Self::new(domain, 0.0, move |_, _, _| value)
    }

    /// Linear state feedback `u = -gain * x`.
    pub fn linear(domain: ControlDomain, gain: f64) -> Self {
        Self::new(domain, gain.abs(), move |_, x, _| -gain * x)
    }

    pub fn evaluate(&self, t: f64, x: f64, pi: f64) -> f64 {
        let u = (self.rule)(t, x, pi);
        if u.is_nan() {
            return self.domain.clamp(0.0);
        }
        self.domain.clamp(u)
    }

    pub fn domain(&self) -> ControlDomain {
        self.domain
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Largest observed ratio `|u(a) - u(b)| / (|x_a - x_b| + |pi_a - pi_b|)`
    /// over the supplied sample pairs `(t, x_a, pi_a, x_b, pi_b)`.
    pub fn observed_lipschitz(&self, pairs: &[(f64, f64, f64, f64, f64)]) -> f64 {
        pairs
            .iter()
            .map(|&(t, xa, pa, xb, pb)| {
                let dist = (xa - xb).abs() + (pa - pb).abs();
                if dist == 0.0 {
                    0.0
                } else {
                    (self.evaluate(t, xa, pa) - self.evaluate(t, xb, pb)).abs() / dist
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Which standing assumption a sampled check failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    /// Bounded derivatives of drift and volatility.
    A1,
    /// Growth bounds on running and terminal cost.
    A2,
    /// Regime-free volatility.
    A3,
    /// Volatility bounded away from zero.
    A4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub assumption: Assumption,
    pub message: String,
}

/// Sampling configuration for [`validate_spec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationConfig {
    /// Growth constant of the cost bounds.
    pub growth_constant: f64,
    /// Largest derivative magnitude accepted on the lattice.
    pub derivative_bound: f64,
    pub lattice_points: usize,
    pub x_range: (f64, f64),
    /// Half-width used when the control domain is unbounded.
    pub control_window: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            growth_constant: 1e6,
            derivative_bound: 1e6,
            lattice_points: 11,
            x_range: (-10.0, 10.0),
            control_window: 10.0,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = fd_step(x);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// True if a sequence sampled at radii 10, 100, 1000, ... keeps growing by at
/// least a factor 3 per decade, i.e. looks unbounded.
fn grows_without_bound(values: &[f64]) -> bool {
    values.len() >= 3 && values.windows(2).all(|w| w[0] > 0.0 && w[1] >= 3.0 * w[0])
}

const PROBE_RADII: [f64; 4] = [10.0, 100.0, 1e3, 1e4];

/// Samples the coefficients on a lattice over `[0, T] x [x_lo, x_hi] x U` and
/// reports every standing-assumption check that fails. An empty list means no
/// sampled violation. Apparent unboundedness is additionally probed along
/// rays `|x| = 10, 100, 1000, 10000`.
pub fn validate_spec(spec: &ProblemSpec, cfg: &ValidationConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let flag = |assumption: Assumption, message: String, out: &mut Vec<Violation>| {
        if !out.iter().any(|v: &Violation| v.assumption == assumption) {
            out.push(Violation { assumption, message });
        }
    };
    let c = spec.coefficients.as_ref();
    let d = spec.n_regimes();
    let regimes: Vec<Regime> = (0..d).map(Regime::from_slot).collect();
    let (u_lo, u_hi) = spec.control_domain.window(cfg.control_window);
    let ts = linspace(0.0, spec.horizon, cfg.lattice_points);
    let xs = linspace(cfg.x_range.0, cfg.x_range.1, cfg.lattice_points);
    let vs = linspace(u_lo, u_hi, cfg.lattice_points);
    let k = cfg.growth_constant;

    for &t in &ts {
        for &x in &xs {
            for &v in &vs {
                let s = c.volatility(t, x, v);
                if !(s >= spec.sigma_min) {
                    flag(
                        Assumption::A4,
                        format!("volatility {s} below {} at (t={t}, x={x}, v={v})", spec.sigma_min),
                        &mut out,
                    );
                }
                let sx = central_diff(|y| c.volatility(t, y, v), x);
                let sv = central_diff(|w| c.volatility(t, x, w), v);
                if !(sx.abs() <= cfg.derivative_bound && sv.abs() <= cfg.derivative_bound) {
                    flag(
                        Assumption::A1,
                        format!("volatility derivative ({sx}, {sv}) at (t={t}, x={x}, v={v})"),
                        &mut out,
                    );
                }
                for &i in &regimes {
                    let bx = central_diff(|y| c.drift(t, y, i, v), x);
                    let bv = central_diff(|w| c.drift(t, x, i, w), v);
                    if !(bx.abs() <= cfg.derivative_bound && bv.abs() <= cfg.derivative_bound) {
                        flag(
                            Assumption::A1,
                            format!("drift derivative ({bx}, {bv}) in regime {i} at (t={t}, x={x}, v={v})"),
                            &mut out,
                        );
                    }
                    let f = c.running_cost(t, x, i, v);
                    let fx = central_diff(|y| c.running_cost(t, y, i, v), x);
                    let fv = central_diff(|w| c.running_cost(t, x, i, w), v);
                    let bound = f.abs() / (1.0 + x * x + v * v) + (fx.abs() + fv.abs()) / (1.0 + x.abs() + v.abs());
                    if !(bound <= k) {
                        flag(
                            Assumption::A2,
                            format!("running cost growth {bound} in regime {i} at (t={t}, x={x}, v={v})"),
                            &mut out,
                        );
                    }
                }
            }
        }
    }
    for &x in &xs {
        for &i in &regimes {
            let g = c.terminal_cost(x, i);
            let gx = central_diff(|y| c.terminal_cost(y, i), x);
            let bound = g.abs() / (1.0 + x * x) + gx.abs() / (1.0 + x.abs());
            if !(bound <= k) {
                flag(Assumption::A2, format!("terminal cost growth {bound} in regime {i} at x={x}"), &mut out);
            }
        }
    }

    // Radial probes for growth that a finite lattice cannot bound.
    let v0 = spec.control_domain.clamp(0.0);
    for sign in [1.0, -1.0] {
        for &t in &[0.0, spec.horizon] {
            for &i in &regimes {
                let normalized_g: Vec<f64> = PROBE_RADII
                    .iter()
                    .map(|&r| {
                        let x = sign * r;
                        c.terminal_cost(x, i).abs() / (1.0 + x * x)
                            + central_diff(|y| c.terminal_cost(y, i), x).abs() / (1.0 + x.abs())
                    })
                    .collect();
                if grows_without_bound(&normalized_g) {
                    flag(
                        Assumption::A2,
                        format!("terminal cost in regime {i} grows faster than quadratically"),
                        &mut out,
                    );
                }
                let normalized_f: Vec<f64> = PROBE_RADII
                    .iter()
                    .map(|&r| {
                        let x = sign * r;
                        c.running_cost(t, x, i, v0).abs() / (1.0 + x * x)
                            + central_diff(|y| c.running_cost(t, y, i, v0), x).abs() / (1.0 + x.abs())
                    })
                    .collect();
                if grows_without_bound(&normalized_f) {
                    flag(
                        Assumption::A2,
                        format!("running cost in regime {i} grows faster than quadratically"),
                        &mut out,
                    );
                }
                let bx: Vec<f64> =
                    PROBE_RADII.iter().map(|&r| central_diff(|y| c.drift(t, y, i, v0), sign * r).abs()).collect();
                if grows_without_bound(&bx) {
                    flag(Assumption::A1, format!("drift derivative in regime {i} appears unbounded in x"), &mut out);
                }
            }
            let sx: Vec<f64> =
                PROBE_RADII.iter().map(|&r| central_diff(|y| c.volatility(t, y, v0), sign * r).abs()).collect();
            if grows_without_bound(&sx) {
                flag(Assumption::A1, "volatility derivative appears unbounded in x".into(), &mut out);
            }
        }
    }
    out
}
