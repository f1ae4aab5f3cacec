//! Least-squares projection onto polynomial bases in standardised features.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Exponent tuples of all monomials in `n` variables with total degree at most `degree`.
pub fn total_degree(n: usize, degree: u32) -> Vec<Vec<u32>> {
    bounded_degree(&vec![degree; n], degree)
}

/// Monomials with per-variable caps and a total-degree cap, in graded order.
pub fn bounded_degree(caps: &[u32], total: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for d in 0..=total {
        let mut cur = vec![0u32; caps.len()];
        collect(caps, d, 0, &mut cur, &mut out);
    }
    out
}

fn collect(caps: &[u32], remaining: u32, var: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if var == caps.len() {
        if remaining == 0 {
            out.push(cur.clone());
        }
        return;
    }
    for e in (0..=remaining.min(caps[var])).rev() {
        cur[var] = e;
        collect(caps, remaining - e, var + 1, cur, out);
    }
    cur[var] = 0;
}

/// A fitted polynomial basis. Features with no spread across the sample
/// are dropped, so the basis may be smaller than requested.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    n_features: usize,
    active: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

impl PolyBasis {
    /// Standardises each feature over `rows` (row-major, `n_features` per row)
    /// and keeps the exponents generated for the active features.
    pub fn fit(rows: &[f64], n_features: usize, exponents: impl Fn(usize) -> Vec<Vec<u32>>) -> Self {
        let n = rows.len() / n_features;
        let mut mean = vec![0.0; n_features];
        let mut scale = vec![1.0; n_features];
        let mut active = Vec::new();
        for f in 0..n_features {
            let col = rows.iter().skip(f).step_by(n_features);
            let m = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean[f] = m;
            if var.sqrt() > 1e-12 * m.abs().max(1.0) {
                scale[f] = var.sqrt();
                active.push(f);
            }
        }
        let exponents = exponents(active.len());
        Self { n_features, active, mean, scale, exponents }
    }

    /// Basis for `n_features` features with fixed standardisation `(mean, scale)`.
    pub fn with_standardization(mean: Vec<f64>, scale: Vec<f64>, active: Vec<usize>, exponents: Vec<Vec<u32>>) -> Self {
        Self { n_features: mean.len(), active, mean, scale, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Largest total degree among the basis monomials.
    pub fn degree(&self) -> u32 {
        self.exponents.iter().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    /// Standardised coordinate of feature `f`.
    pub fn standardize(&self, f: usize, value: f64) -> f64 {
        (value - self.mean[f]) / self.scale[f]
    }

    /// Evaluates all basis functions at `features` into `out`.
    pub fn eval_into(&self, features: &[f64], out: &mut [f64]) {
        debug_assert_eq!(features.len(), self.n_features);
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(&self.active).map(|(&p, &f)| self.standardize(f, features[f]).powi(p as i32)).product();
        }
    }

    /// `sum_j coef_j psi_j(features)`.
    pub fn evaluate(&self, coef: &[f64], features: &[f64]) -> f64 {
        let mut psi = vec![0.0; self.len()];
        self.eval_into(features, &mut psi);
        psi.iter().zip(coef).map(|(p, c)| p * c).sum()
    }
}

/// Coefficients and diagnostics of a multi-target least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    /// One coefficient vector per target.
    pub coef: Vec<Vec<f64>>,
    /// Coefficient of determination per target (1 when the target is constant).
    pub r2: Vec<f64>,
    /// Fitted values, sample-major like the targets.
    pub fitted: Vec<f64>,
}

/// Least-squares projection onto a basis for a fixed set of samples.
///
/// The design is orthonormalised once (two passes of Gram-matrix whitening,
/// which keeps the rounding error proportional to the condition number of
/// the design rather than its square) and reused across target sets.
#[derive(Debug, Clone)]
pub struct Projector {
    basis: PolyBasis,
    /// Orthonormal design `Q = Psi W`, sample-major.
    q: Vec<f64>,
    w: DMatrix<f64>,
    n: usize,
}

fn gram(rows: &[f64], m: usize) -> DMatrix<f64> {
    let mut g = DMatrix::<f64>::zeros(m, m);
    for row in rows.chunks_exact(m) {
        for a in 0..m {
            for b in a..m {
                g[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// `W = V D^{-1/2}` from the eigendecomposition of the Gram matrix.
fn whitening(g: DMatrix<f64>, rank_tol: f64) -> Result<DMatrix<f64>> {
    let m = g.nrows();
    let eig = g.symmetric_eigen();
    let top = eig.eigenvalues.max();
    let rank = eig.eigenvalues.iter().filter(|&&l| l > rank_tol * top).count();
    if rank < m || !(top > 0.0) {
        return Err(Error::Regression(format!("design matrix has rank {rank} of {m}")));
    }
    let mut w = eig.eigenvectors;
    for (mut col, l) in w.column_iter_mut().zip(eig.eigenvalues.iter()) {
        col /= l.sqrt();
    }
    Ok(w)
}

fn transform(rows: &mut [f64], w: &DMatrix<f64>) {
    let m = w.nrows();
    let mut tmp = vec![0.0; m];
    for row in rows.chunks_exact_mut(m) {
        for (c, t) in tmp.iter_mut().enumerate() {
            *t = (0..m).map(|a| row[a] * w[(a, c)]).sum();
        }
        row.copy_from_slice(&tmp);
    }
}

impl Projector {
    /// Fails if the Gram matrix of the design has an eigenvalue below
    /// `rank_tol` times its largest.
    pub fn new(basis: PolyBasis, features: &[f64], rank_tol: f64) -> Result<Self> {
        let nf = basis.n_features;
        let n = features.len() / nf;
        let m = basis.len();
        if n < m {
            return Err(Error::Regression(format!("{n} samples for {m} basis functions")));
        }
        let mut q = vec![0.0; n * m];
        for (s, row) in q.chunks_exact_mut(m).enumerate() {
            basis.eval_into(&features[s * nf..(s + 1) * nf], row);
        }
        let w1 = whitening(gram(&q, m), rank_tol)?;
        transform(&mut q, &w1);
        let w2 = whitening(gram(&q, m), 1e-3)?;
        transform(&mut q, &w2);
        Ok(Self { basis, q, w: w1 * w2, n })
    }

    /// Steps the basis level down from `level` while the design is rank deficient.
    pub fn with_fallback(
        features: &[f64],
        n_features: usize,
        level: u32,
        exponents: impl Fn(usize, u32) -> Vec<Vec<u32>>,
        rank_tol: f64,
    ) -> Result<Self> {
        let mut lvl = level;
        loop {
            let basis = PolyBasis::fit(features, n_features, |n| exponents(n, lvl));
            match Self::new(basis, features, rank_tol) {
                Ok(p) => {
                    if lvl < level {
                        log::debug!("regression fell back from level {level} to {lvl}");
                    }
                    return Ok(p);
                }
                Err(e) if lvl == 0 => return Err(e),
                Err(_) => lvl -= 1,
            }
        }
    }

    pub fn basis(&self) -> &PolyBasis {
        &self.basis
    }

    /// Projects `n_targets` columns of sample-major `targets`.
    pub fn project(&self, targets: &[f64], n_targets: usize) -> Fit {
        let m = self.basis.len();
        let mut c = DMatrix::<f64>::zeros(m, n_targets);
        for (s, row) in self.q.chunks_exact(m).enumerate() {
            for t in 0..n_targets {
                let y = targets[s * n_targets + t];
                for a in 0..m {
                    c[(a, t)] += row[a] * y;
                }
            }
        }
        let coef_m = &self.w * &c;
        let coef: Vec<Vec<f64>> = (0..n_targets).map(|t| coef_m.column(t).iter().copied().collect()).collect();
        let mut fitted = vec![0.0; self.n * n_targets];
        let mut ss_res = vec![0.0; n_targets];
        let mut sum = vec![0.0; n_targets];
        let mut sum_sq = vec![0.0; n_targets];
        for (s, row) in self.q.chunks_exact(m).enumerate() {
            for t in 0..n_targets {
                let y = targets[s * n_targets + t];
                let f: f64 = (0..m).map(|a| row[a] * c[(a, t)]).sum();
                fitted[s * n_targets + t] = f;
                ss_res[t] += (y - f) * (y - f);
                sum[t] += y;
                sum_sq[t] += y * y;
            }
        }
        let n = self.n as f64;
        let r2 = (0..n_targets)
            .map(|t| {
                let ss_tot = sum_sq[t] - sum[t] * sum[t] / n;
                if ss_tot <= 1e-14 * sum_sq[t].max(1e-300) {
                    1.0
                } else {
                    1.0 - ss_res[t] / ss_tot
                }
            })
            .collect();
        Fit { coef, r2, fitted }
    }
}
