//! Monte Carlo estimates with standard errors.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// A point estimate with its standard error (zero for deterministic evaluations).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate<T> {
    pub value: T,
    pub stderr: T,
    pub samples: usize,
}

impl<T: Real> Estimate<T> {
    pub fn exact(value: T) -> Self {
        Self { value, stderr: T::zero(), samples: 0 }
    }

    /// Sample mean and standard error of the mean. Welford updates keep a
    /// constant sample exactly constant.
    pub fn from_samples(values: &[T]) -> Self {
        let mut acc = Welford::default();
        for &v in values {
            acc.push(v);
        }
        acc.estimate()
    }

    /// `|self - other| <= k * sqrt(se1^2 + se2^2) + slack`.
    pub fn agrees_with(&self, other: &Self, k: T, slack: T) -> bool {
        let se = (self.stderr * self.stderr + other.stderr * other.stderr).sqrt();
        (self.value - other.value).abs() <= k * se + slack
    }
}

/// Online mean/variance.
#[derive(Clone, Copy, Debug)]
pub struct Welford<T> {
    n: usize,
    mean: T,
    m2: T,
}

impl<T: Real> Default for Welford<T> {
    fn default() -> Self {
        Self { n: 0, mean: T::zero(), m2: T::zero() }
    }
}

impl<T: Real> Welford<T> {
    #[inline]
    pub fn push(&mut self, x: T) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / T::from_usize_lossy(self.n);
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    pub fn variance(&self) -> T {
        if self.n < 2 {
            T::zero()
        } else {
            self.m2 / T::from_usize_lossy(self.n - 1)
        }
    }

    pub fn estimate(&self) -> Estimate<T> {
        let stderr = if self.n < 2 {
            T::zero()
        } else {
            (self.variance() / T::from_usize_lossy(self.n)).sqrt()
        };
        Estimate { value: self.mean, stderr, samples: self.n }
    }
}
