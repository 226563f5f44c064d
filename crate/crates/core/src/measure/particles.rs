//! Weighted particle measures, their evolution under the dual semigroup and the
//! duality check `⟨φ, P_t*μ⟩ = ⟨P_tφ, μ⟩`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::{check_dim, check_finite_vec, CovarianceOperator, GaussianSampler};
use crate::rng::{derive_seed, StreamRng};
use crate::scalar::Real;
use crate::sde::{parse_real, SemigroupHandle};
use crate::stats::Estimate;
use crate::testfn::{CompiledBank, TestFunction};

/// Tolerance on `Σw = 1` for a measure to count as a probability.
pub const PROBABILITY_TOL: f64 = 1e-12;

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum<T: Real>(values: impl IntoIterator<Item = T>) -> T {
    let (mut sum, mut c) = (T::zero(), T::zero());
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `Σ w_i y_i` with the standard error of the i.i.d. estimator `N w_i y_i`.
/// For equal weights this is the usual sample standard error.
pub(crate) fn weighted_estimate<T: Real>(weights: &[T], values: impl Iterator<Item = T> + Clone) -> Estimate<T> {
    let n = weights.len();
    let total = compensated_sum(weights.iter().zip(values.clone()).map(|(w, y)| *w * y));
    if n < 2 {
        return Estimate { value: total, stderr: T::zero(), samples: n };
    }
    let nn = T::from_usize_lossy(n);
    let mean = total / nn;
    let ss = compensated_sum(weights.iter().zip(values).map(|(w, y)| {
        let d = *w * y - mean;
        d * d
    }));
    // sd(N w y)/sqrt(N) = sqrt(N · ss / (N−1))
    let stderr = (nn * ss / T::from_usize_lossy(n - 1)).sqrt();
    Estimate { value: total, stderr, samples: n }
}

/// `μ = Σ_i w_i δ_{x_i}` on `R^d`; weights may be signed.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleMeasure<T: Real> {
    /// Particle `i` is column `i`.
    positions: DMatrix<T>,
    weights: Vec<T>,
    pub label: String,
}

impl<T: Real> ParticleMeasure<T> {
    pub fn new(positions: DMatrix<T>, weights: Vec<T>, label: impl Into<String>) -> Result<Self> {
        ensure!(positions.nrows() >= 1, Input, "particles need dimension >= 1");
        ensure!(positions.ncols() >= 1, Input, "a particle measure needs at least one particle");
        ensure!(
            positions.ncols() == weights.len(),
            Contract,
            "{} particles but {} weights",
            positions.ncols(),
            weights.len()
        );
        ensure!(positions.iter().all(|v| v.is_finite()), Input, "particle positions must be finite");
        ensure!(weights.iter().all(|v| v.is_finite()), Input, "weights must be finite");
        Ok(Self { positions, weights, label: label.into() })
    }

    pub fn from_points(points: &[DVector<T>], weights: Vec<T>, label: impl Into<String>) -> Result<Self> {
        ensure!(!points.is_empty(), Input, "a particle measure needs at least one particle");
        let d = points[0].len();
        for p in points {
            check_dim(p, d, "particle")?;
        }
        Self::new(DMatrix::from_columns(points), weights, label)
    }

    /// Equal weights `1/n`.
    pub fn empirical(points: &[DVector<T>], label: impl Into<String>) -> Result<Self> {
        let w = T::one() / T::from_usize_lossy(points.len().max(1));
        Self::from_points(points, vec![w; points.len()], label)
    }

    /// `δ_x` carried by `n` coincident particles of weight `1/n`.
    pub fn dirac(x: &DVector<T>, n: usize) -> Result<Self> {
        check_finite_vec(x, "x")?;
        ensure!(n >= 1, Input, "need at least one particle");
        let positions = DMatrix::from_fn(x.len(), n, |r, _| x[r]);
        let w = T::one() / T::from_usize_lossy(n);
        Self::new(positions, vec![w; n], "dirac")
    }

    /// `n` equally weighted draws from `N(mean, cov)`; draw `i` uses stream `i`.
    pub fn gaussian(mean: &DVector<T>, cov: &CovarianceOperator<T>, n: usize, seed: u64) -> Result<Self> {
        check_dim(mean, cov.dim(), "mean")?;
        ensure!(n >= 1, Input, "need at least one particle");
        let sampler = GaussianSampler::new(cov)?;
        let columns: Vec<DVector<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut y = mean.clone();
                sampler.sample_add(&mut StreamRng::new(seed, i as u64), &mut y);
                y
            })
            .collect();
        Self::empirical(&columns, "gaussian")
    }

    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn positions(&self) -> &DMatrix<T> {
        &self.positions
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn particle(&self, i: usize) -> DVector<T> {
        self.positions.column(i).into_owned()
    }

    pub fn total_mass(&self) -> T {
        compensated_sum(self.weights.iter().copied())
    }

    /// `Σ|w_i|`, an upper bound for the total variation of the represented measure.
    pub fn total_variation(&self) -> T {
        compensated_sum(self.weights.iter().map(|w| w.abs()))
    }

    pub fn is_probability(&self) -> bool {
        self.weights.iter().all(|w| *w >= T::zero()) && (self.total_mass() - T::one()).abs() <= T::tol(PROBABILITY_TOL)
    }

    /// `∫ f dμ` with the standard error of the particle estimator.
    pub fn integrate<F>(&self, f: F) -> Estimate<T>
    where
        F: Fn(&DVector<T>) -> T + Sync,
    {
        let values: Vec<T> = (0..self.len()).into_par_iter().map(|i| f(&self.particle(i))).collect();
        weighted_estimate(&self.weights, values.iter().copied())
    }

    pub fn integrate_fn(&self, phi: &TestFunction<T>, model: &crate::model::GalerkinModel<T>) -> Result<Estimate<T>> {
        let bank = CompiledBank::compile(model, std::slice::from_ref(phi))?;
        ensure!(bank.dim() == self.dim(), Contract, "test function and measure dimensions differ");
        Ok(self.integrate(|x| bank.eval(0, x)))
    }

    /// `∫ x μ(dx)` divided by the total mass.
    pub fn mean(&self) -> DVector<T> {
        let mass = self.total_mass();
        let mut m = DVector::zeros(self.dim());
        for (k, w) in self.weights.iter().enumerate() {
            m.axpy(*w, &self.positions.column(k), T::one());
        }
        if mass != T::zero() {
            m /= mass;
        }
        m
    }

    /// Mass-normalised second central moment.
    pub fn covariance(&self) -> DMatrix<T> {
        let mass = self.total_mass();
        let mean = self.mean();
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for (k, w) in self.weights.iter().enumerate() {
            let dx = self.positions.column(k) - &mean;
            c.ger(*w, &dx, &dx, T::one());
        }
        if mass != T::zero() {
            c /= mass;
        }
        c
    }

    /// `weight,x_1,…,x_d` rows, shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("particle csv", e);
        let mut header = String::from("weight");
        for k in 1..=self.dim() {
            header.push_str(&format!(",x_{k}"));
        }
        writeln!(out, "{header}").map_err(io)?;
        for (i, w) in self.weights.iter().enumerate() {
            let mut line = w.to_string();
            for v in self.positions.column(i).iter() {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, label: impl Into<String>) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty particle file".into()))?
            .map_err(|e| Error::io("particle csv", e))?;
        let cols: Vec<&str> = header.split(',').collect();
        ensure!(cols.len() >= 2 && cols[0] == "weight", Format, "unexpected particle header `{header}`");
        let d = cols.len() - 1;
        let mut weights = Vec::new();
        let mut data = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("particle csv", e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            ensure!(fields.len() == d + 1, Format, "line {}: expected {} fields", k + 2, d + 1);
            weights.push(parse_real(fields[0], k + 2)?);
            for f in &fields[1..] {
                data.push(parse_real(f, k + 2)?);
            }
        }
        let n = weights.len();
        Self::new(DMatrix::from_vec(d, n, data), weights, label)
    }
}

/// Sidecar metadata for a particle snapshot file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub time: f64,
    pub label: String,
    pub handle: String,
    /// Root seed followed by any derived seeds, outermost first.
    pub seed_lineage: Vec<u64>,
    pub particles: usize,
    pub total_mass: f64,
    /// `Σ|w_i|`; bounds the total variation from above.
    pub total_variation_bound: f64,
}

/// Snapshots `μ_{t_k}` on a strictly increasing grid starting at 0.
#[derive(Clone, Debug)]
pub struct MeasureTrajectory<T: Real> {
    pub times: Vec<T>,
    pub snapshots: Vec<ParticleMeasure<T>>,
    pub handle: String,
    pub seed: u64,
}

impl<T: Real> MeasureTrajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn meta(&self, k: usize) -> SnapshotMeta {
        let s = &self.snapshots[k];
        SnapshotMeta {
            time: self.times[k].as_f64(),
            label: s.label.clone(),
            handle: self.handle.clone(),
            seed_lineage: if k == 0 { vec![self.seed] } else { vec![self.seed, derive_seed(self.seed, k as u64)] },
            particles: s.len(),
            total_mass: s.total_mass().as_f64(),
            total_variation_bound: s.total_variation().as_f64(),
        }
    }
}

pub(crate) fn check_grid<T: Real>(times: &[T]) -> Result<()> {
    ensure!(times.len() >= 2, Input, "time grid needs at least two points, got {}", times.len());
    ensure!(times[0] == T::zero(), Input, "time grid must start at 0");
    ensure!(
        times.windows(2).all(|w| w[1] > w[0]) && times.iter().all(|t| t.is_finite()),
        Input,
        "time grid must be finite and strictly increasing"
    );
    Ok(())
}

/// `0, h, 2h, …, horizon` with `h = horizon/steps`.
pub fn uniform_grid<T: Real>(horizon: T, steps: usize) -> Vec<T> {
    let h = horizon / T::from_usize_lossy(steps.max(1));
    (0..=steps).map(|k| if k == steps { horizon } else { h * T::from_usize_lossy(k) }).collect()
}

/// Moves every particle along one independent path across the grid and calls
/// `observe(k, positions)` at each grid time (including `t_0`). The gap ending
/// at `t_k` draws particle `i` from stream `i` of a seed derived from `(seed, k)`,
/// so the result does not depend on thread count.
pub(crate) fn evolve_observed<T: Real>(
    handle: &SemigroupHandle<T>,
    initial: &ParticleMeasure<T>,
    times: &[T],
    seed: u64,
    mut observe: impl FnMut(usize, &DMatrix<T>) -> Result<()>,
) -> Result<()> {
    check_grid(times)?;
    ensure!(initial.dim() == handle.model().dim(), Contract, "measure and model dimensions differ");
    let model = handle.model();
    let mut positions = initial.positions().clone();
    observe(0, &positions)?;
    let d = initial.dim();
    for k in 1..times.len() {
        let schedule = handle.schedule(times[k] - times[k - 1])?;
        let gap_seed = derive_seed(seed, k as u64);
        positions
            .as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .try_for_each(|(i, col)| -> Result<()> {
                let x = DVector::from_column_slice(col);
                let y = schedule.run(model, &x, &mut StreamRng::new(gap_seed, i as u64))?;
                col.copy_from_slice(y.as_slice());
                Ok(())
            })?;
        observe(k, &positions)?;
    }
    Ok(())
}

/// `μ_{t_k} = P_{t_k}*μ` on the grid, one coupled path per particle.
pub fn evolve<T: Real>(
    handle: &SemigroupHandle<T>,
    initial: &ParticleMeasure<T>,
    times: &[T],
    seed: u64,
) -> Result<MeasureTrajectory<T>> {
    let mut snapshots = Vec::with_capacity(times.len());
    evolve_observed(handle, initial, times, seed, |k, pos| {
        snapshots.push(ParticleMeasure {
            positions: pos.clone(),
            weights: initial.weights.clone(),
            label: format!("{}@{k}", initial.label),
        });
        Ok(())
    })?;
    Ok(MeasureTrajectory { times: times.to_vec(), snapshots, handle: handle.describe(), seed })
}

/// `P_t*μ`: particle `i` spawns `k` endpoints of `X(t, x_i)`, each of weight
/// `w_i/k`. Endpoint `j` of particle `i` uses stream `i·k + j`.
pub fn dual_pushforward<T: Real>(
    handle: &SemigroupHandle<T>,
    mu: &ParticleMeasure<T>,
    t: T,
    samples_per_particle: usize,
    seed: u64,
) -> Result<ParticleMeasure<T>> {
    ensure!(samples_per_particle >= 1, Input, "need at least one sample per particle");
    ensure!(t.is_finite() && t >= T::zero(), Input, "time must be finite and >= 0, got {t}");
    ensure!(mu.dim() == handle.model().dim(), Contract, "measure and model dimensions differ");
    let k = samples_per_particle;
    let d = mu.dim();
    let schedule = handle.schedule(t)?;
    let model = handle.model();
    let mut positions = DMatrix::zeros(d, mu.len() * k);
    positions
        .as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .try_for_each(|(m, col)| -> Result<()> {
            let x = mu.particle(m / k);
            let y = schedule.run(model, &x, &mut StreamRng::new(seed, m as u64))?;
            col.copy_from_slice(y.as_slice());
            Ok(())
        })?;
    let kk = T::from_usize_lossy(k);
    let weights = mu.weights.iter().flat_map(|w| std::iter::repeat_n(*w / kk, k)).collect();
    Ok(ParticleMeasure { positions, weights, label: format!("P_t*({})", mu.label) })
}

/// How the right-hand side `⟨P_tφ, μ⟩` of the duality check is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DualitySampling {
    /// Reuse the pushforward endpoints, grouped by parent particle.
    Shared,
    /// Evaluate `P_tφ(x_i)` with the handle under an independent seed.
    Independent { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualityOutcome<T> {
    pub pushforward: Estimate<T>,
    pub transition: Estimate<T>,
    pub residual: T,
    pub combined_stderr: T,
}

/// `|∫φ d(P_t*μ) − ∫P_tφ dμ|` with `samples_per_particle` endpoints per particle.
pub fn duality_check<T: Real>(
    handle: &SemigroupHandle<T>,
    phi: &TestFunction<T>,
    mu: &ParticleMeasure<T>,
    t: T,
    samples_per_particle: usize,
    seed: u64,
    sampling: DualitySampling,
) -> Result<DualityOutcome<T>> {
    let bank = CompiledBank::compile(handle.model(), std::slice::from_ref(phi))?;
    let pushed = dual_pushforward(handle, mu, t, samples_per_particle, seed)?;
    let values: Vec<T> = (0..pushed.len()).into_par_iter().map(|m| bank.eval(0, &pushed.particle(m))).collect();
    let lhs = weighted_estimate(&pushed.weights, values.iter().copied());
    let k = samples_per_particle;
    let rhs = match sampling {
        DualitySampling::Shared => {
            let kk = T::from_usize_lossy(k);
            let means: Vec<T> = values.chunks(k).map(|c| compensated_sum(c.iter().copied()) / kk).collect();
            let mut e = weighted_estimate(&mu.weights, means.iter().copied());
            e.stderr = lhs.stderr;
            e
        }
        DualitySampling::Independent { seed: other } => {
            let per: Vec<Estimate<T>> = (0..mu.len())
                .map(|i| {
                    handle
                        .with_seed(derive_seed(other, i as u64))
                        .with_samples(k.max(2))
                        .transition_apply_compiled(&bank, 0, t, &mu.particle(i))
                })
                .collect::<Result<_>>()?;
            let value = compensated_sum(mu.weights.iter().zip(&per).map(|(w, e)| *w * e.value));
            let var = compensated_sum(mu.weights.iter().zip(&per).map(|(w, e)| *w * *w * e.stderr * e.stderr));
            Estimate { value, stderr: var.sqrt(), samples: per.iter().map(|e| e.samples).sum() }
        }
    };
    let combined = match sampling {
        DualitySampling::Shared => lhs.stderr,
        DualitySampling::Independent { .. } => (lhs.stderr * lhs.stderr + rhs.stderr * rhs.stderr).sqrt(),
    };
    Ok(DualityOutcome {
        pushforward: lhs,
        transition: rhs,
        residual: (lhs.value - rhs.value).abs(),
        combined_stderr: combined,
    })
}
