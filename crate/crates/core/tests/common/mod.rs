//! Closed-form references used by the acceptance runner.

use hybridmp::adjoint::BackwardProblem;
use hybridmp::pathsim::TimeGrid;
use hybridmp::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `P(alpha_t = 1)` for the two-state chain with rates `l1` (1 to 2) and
/// `l2` (2 to 1).
pub fn two_state_marginal(p0: f64, l1: f64, l2: f64, t: f64) -> f64 {
    let s = l1 + l2;
    if s == 0.0 {
        return p0;
    }
    let stationary = l2 / s;
    stationary + (p0 - stationary) * (-s * t).exp()
}

/// Scalar LQ problem `dx = (a x + b u) dt + sigma dW`, cost
/// `1/2 int (q x^2 + r u^2) dt + 1/2 g x_T^2`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarLq {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub r: f64,
    pub g: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl ScalarLq {
    /// Solution of `-S' = 2 a S + q - (b^2 / r) S^2`, `S(T) = g`.
    pub fn riccati(&self, t: f64) -> f64 {
        let beta = self.b * self.b / self.r;
        let tau = self.horizon - t;
        if beta == 0.0 {
            if self.a == 0.0 {
                return self.g + self.q * tau;
            }
            let e = (2.0 * self.a * tau).exp();
            return self.g * e + self.q * (e - 1.0) / (2.0 * self.a);
        }
        let d = (self.a * self.a + beta * self.q).sqrt();
        let (sp, sm) = ((self.a + d) / beta, (self.a - d) / beta);
        let c = (self.g - sp) / (self.g - sm);
        let e = c * (-2.0 * d * tau).exp();
        (sp - e * sm) / (1.0 - e)
    }

    /// `1/2 S(0) x0^2 + 1/2 sigma^2 int_0^T S dt` by composite Simpson.
    pub fn optimal_cost(&self) -> f64 {
        let m = 2000;
        let h = self.horizon / m as f64;
        let integral: f64 = (0..=m)
            .map(|i| {
                let w = if i == 0 || i == m {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * self.riccati(i as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0;
        0.5 * self.riccati(0.0) * self.x0 * self.x0 + 0.5 * self.sigma * self.sigma * integral
    }
}

/// `Phi_t = E[Theta_T + int_t^T (a Phi + c Lambda) ds | F_t]` with
/// `Theta = x0 + nu` and `nu` a Brownian motion. The solution is
/// `Phi_t = e^{a(T-t)} (Theta_t + c (T - t))`, `Lambda_t = e^{a(T-t)}`.
pub struct LinearBsde {
    pub grid: TimeGrid,
    pub a: f64,
    pub c: f64,
    /// Innovation increments, path-major.
    pub dnu: Vec<f64>,
    /// `Theta_k`, path-major over nodes.
    pub theta: Vec<f64>,
    pub n_paths: usize,
}

impl LinearBsde {
    pub fn new(grid: TimeGrid, a: f64, c: f64, x0: f64, n_paths: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n_steps();
        let sqrt_dt = grid.dt().sqrt();
        let mut dnu = Vec::with_capacity(n_paths * n);
        let mut theta = Vec::with_capacity(n_paths * (n + 1));
        for _ in 0..n_paths {
            let mut x = x0;
            theta.push(x);
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                dnu.push(z * sqrt_dt);
                x += z * sqrt_dt;
                theta.push(x);
            }
        }
        Self { grid, a, c, dnu, theta, n_paths }
    }

    pub fn theta(&self, path: usize, k: usize) -> f64 {
        self.theta[path * (self.grid.n_nodes()) + k]
    }

    pub fn exact_phi(&self, path: usize, k: usize) -> f64 {
        let tau = self.grid.horizon() - self.grid.node(k);
        (self.a * tau).exp() * (self.theta(path, k) + self.c * tau)
    }

    pub fn exact_lambda(&self, k: usize) -> f64 {
        (self.a * (self.grid.horizon() - self.grid.node(k))).exp()
    }
}

impl BackwardProblem for LinearBsde {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn n_paths(&self) -> usize {
        self.n_paths
    }

    fn dim(&self) -> usize {
        1
    }

    fn n_features(&self) -> usize {
        1
    }

    fn features(&self, path: usize, k: usize, out: &mut [f64]) {
        out[0] = self.theta(path, k);
    }

    fn innovation(&self, path: usize, k: usize) -> f64 {
        self.dnu[path * self.grid.n_steps() + k]
    }

    fn terminal(&self, path: usize, out: &mut [f64]) {
        out[0] = self.theta(path, self.grid.n_steps());
    }

    fn driver(&self, _path: usize, _k: usize, phi_next: &[f64], lambda: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = self.a * phi_next[0] + self.c * lambda[0];
        Ok(())
    }
}
