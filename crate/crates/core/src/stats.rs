//! Monte Carlo summaries.

use serde::{Deserialize, Serialize};

/// Mergeable mean/variance accumulator (Chan et al. parallel update).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn merge(&mut self, other: &Accumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { mean: self.mean, std_error: self.std_error(), n: self.count as usize }
    }
}

impl FromIterator<f64> for Accumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Accumulator::new();
        for v in iter {
            acc.push(v);
        }
        acc
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        samples.iter().copied().collect::<Accumulator>().estimate()
    }

    /// `sqrt(se_a^2 + se_b^2)`.
    pub fn combined_se(&self, other: &Estimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

/// Sample autocorrelation at `lag` (mean-centred, biased normalisation).
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    if xs.len() <= lag + 1 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let denom: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = xs.windows(lag + 1).map(|w| (w[0] - mean) * (w[lag] - mean)).sum();
    num / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_samples_have_zero_error() {
        let e = Estimate::from_samples(&[3.0; 10]);
        assert_eq!(e.mean, 3.0);
        assert_eq!(e.std_error, 0.0);
    }

    proptest! {
        #[test]
        fn merge_matches_sequential(xs in proptest::collection::vec(-1e3f64..1e3, 2..60), split in 0usize..60) {
            let split = split.min(xs.len());
            let whole: Accumulator = xs.iter().copied().collect();
            let mut left: Accumulator = xs[..split].iter().copied().collect();
            let right: Accumulator = xs[split..].iter().copied().collect();
            left.merge(&right);
            prop_assert_eq!(left.count(), whole.count());
            prop_assert!((left.mean() - whole.mean()).abs() <= 1e-9 * (1.0 + whole.mean().abs()));
            prop_assert!((left.variance() - whole.variance()).abs() <= 1e-7 * (1.0 + whole.variance()));
        }
    }
}
