//! The weak measure equation
//!
//! ```text
//! ∫φ dμ_t − ∫φ dμ_0 = ∫_0^t ∫ Kφ dμ_s ds
//! ```
//!
//! checked on a grid for a bank of OU-integral functions, whose `Kφ` is known in
//! closed form. The time integral is the trapezoid rule on the snapshot grid.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::model::GalerkinModel;
use crate::rng::StreamRng;
use crate::scalar::Real;
use crate::sde::SemigroupHandle;
use crate::stats::Estimate;
use crate::testfn::{CompiledBank, Part, TestFunction};

use super::particles::{check_grid, compensated_sum, evolve_observed, MeasureTrajectory, ParticleMeasure};

/// Upper limits of the default bank.
pub const BANK_LIMITS: [f64; 2] = [0.5, 1.0];
/// Frequencies per upper limit in the default bank.
pub const BANK_FREQUENCIES: usize = 4;
/// Frequency components are uniform on `[-BANK_FREQUENCY_RANGE, BANK_FREQUENCY_RANGE]`.
pub const BANK_FREQUENCY_RANGE: f64 = 0.75;
const BANK_START_NODES: usize = 8;
const BANK_REFINE_TOL: f64 = 1e-10;

/// The default bank: `φ_{a,h}` for `a ∈ {0.5, 1}` and four seeded frequencies,
/// real and imaginary parts (16 functions). Quadrature nodes are refined at
/// `probes` until doubling changes values by less than 1e-10.
pub fn default_bank<T: Real>(model: &GalerkinModel<T>, seed: u64, probes: &[DVector<T>]) -> Result<Vec<TestFunction<T>>> {
    let d = model.dim();
    let mut rng = StreamRng::new(seed, u64::MAX);
    let freqs: Vec<Vec<T>> = (0..BANK_FREQUENCIES)
        .map(|_| (0..d).map(|_| rng.uniform(-BANK_FREQUENCY_RANGE, BANK_FREQUENCY_RANGE)).collect())
        .collect();
    let mut bank = Vec::with_capacity(BANK_LIMITS.len() * BANK_FREQUENCIES * 2);
    for &a in &BANK_LIMITS {
        for h in &freqs {
            for part in [Part::Real, Part::Imaginary] {
                let phi = TestFunction::ou_integral_with_nodes(T::lit(a), h.clone(), part, BANK_START_NODES);
                bank.push(phi.refine_nodes(model, probes, BANK_START_NODES, T::lit(BANK_REFINE_TOL))?);
            }
        }
    }
    Ok(bank)
}

/// Residual table: entry `[k][j]` belongs to grid time `t_k` and bank function `j`.
#[derive(Clone, Debug)]
pub struct MeasureResidual<T: Real> {
    pub times: Vec<T>,
    pub functions: Vec<String>,
    /// `m_j(t_k) = ∫φ_j dμ_{t_k}`.
    pub moments: Vec<Vec<Estimate<T>>>,
    /// `g_j(t_k) = ∫Kφ_j dμ_{t_k}`.
    pub generator: Vec<Vec<Estimate<T>>>,
    /// Trapezoid `∫_0^{t_k} g_j`.
    pub integral: Vec<Vec<T>>,
    /// `|m_j(t_k) − m_j(0) − ∫_0^{t_k} g_j|`, with the standard error of the
    /// per-particle residual.
    pub residual: Vec<Vec<Estimate<T>>>,
    /// Mass-normalised mean and per-coordinate variance of `μ_{t_k}`.
    pub mean: Vec<Vec<T>>,
    pub variance: Vec<Vec<T>>,
}

impl<T: Real> MeasureResidual<T> {
    pub fn max_residual(&self) -> T {
        self.residual.iter().flatten().fold(T::zero(), |m, e| m.max(e.value))
    }

    /// Median over all `(k, j)` with `k ≥ 1`.
    pub fn median_residual(&self) -> T {
        let mut all: Vec<T> = self.residual.iter().skip(1).flatten().map(|e| e.value).collect();
        if all.is_empty() {
            return T::zero();
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let n = all.len();
        if n % 2 == 1 {
            all[n / 2]
        } else {
            (all[n / 2 - 1] + all[n / 2]) * T::lit(0.5)
        }
    }

    /// Largest residual of function `j` over the grid.
    pub fn max_for(&self, j: usize) -> T {
        self.residual.iter().fold(T::zero(), |m, row| m.max(row[j].value))
    }
}

/// Per-particle running state: value at time 0, trapezoid integral, last `Kφ`.
struct Accumulator<T: Real> {
    weights: Vec<T>,
    phi0: Vec<T>,
    integral: Vec<T>,
    previous: Vec<T>,
    last_time: T,
    table: MeasureResidual<T>,
}

impl<T: Real> Accumulator<T> {
    fn new(bank: &[TestFunction<T>], weights: &[T]) -> Self {
        let size = weights.len() * bank.len();
        Self {
            weights: weights.to_vec(),
            phi0: vec![T::zero(); size],
            integral: vec![T::zero(); size],
            previous: vec![T::zero(); size],
            last_time: T::zero(),
            table: MeasureResidual {
                times: Vec::new(),
                functions: bank.iter().map(|f| f.to_string()).collect(),
                moments: Vec::new(),
                generator: Vec::new(),
                integral: Vec::new(),
                residual: Vec::new(),
                mean: Vec::new(),
                variance: Vec::new(),
            },
        }
    }

    /// `values` and `gens` are particle-major `n × nf`; `positions` column-major `d × n`.
    fn record(&mut self, time: T, values: &[T], gens: &[T], positions: &[T], d: usize) {
        let nf = self.table.functions.len();
        let first = self.table.times.is_empty();
        let half = (time - self.last_time) * T::lit(0.5);
        if first {
            self.phi0.copy_from_slice(values);
        } else {
            for ((acc, prev), g) in self.integral.iter_mut().zip(&self.previous).zip(gens) {
                *acc += half * (*prev + *g);
            }
        }
        self.previous.copy_from_slice(gens);
        self.last_time = time;

        let w = &self.weights;
        let moments = row_estimates(w, values, nf);
        let generator = row_estimates(w, gens, nf);
        let integral = row_estimates(w, &self.integral, nf).into_iter().map(|e| e.value).collect();
        let diff: Vec<T> = values
            .iter()
            .zip(&self.phi0)
            .zip(&self.integral)
            .map(|((v, p), i)| *v - *p - *i)
            .collect();
        let residual = row_estimates(w, &diff, nf)
            .into_iter()
            .map(|mut e| {
                e.value = e.value.abs();
                e
            })
            .collect();
        let (mean, variance) = coordinate_moments(w, positions, d);
        let t = &mut self.table;
        t.mean.push(mean);
        t.variance.push(variance);
        t.times.push(time);
        t.moments.push(moments);
        t.generator.push(generator);
        t.integral.push(integral);
        t.residual.push(residual);
    }
}

/// Weighted estimate (as in `particles`) of every column of a particle-major `n × nf` buffer,
/// in two sequential sweeps. Summation order per column matches the column-wise
/// routine, so results are identical.
fn row_estimates<T: Real>(weights: &[T], buf: &[T], nf: usize) -> Vec<Estimate<T>> {
    let n = weights.len();
    let mut sum = vec![(T::zero(), T::zero()); nf];
    for (row, w) in buf.chunks_exact(nf).zip(weights) {
        for (acc, y) in sum.iter_mut().zip(row) {
            neumaier_add(acc, *w * *y);
        }
    }
    let totals: Vec<T> = sum.iter().map(|(s, c)| *s + *c).collect();
    if n < 2 {
        return totals.into_iter().map(|v| Estimate { value: v, stderr: T::zero(), samples: n }).collect();
    }
    let nn = T::from_usize_lossy(n);
    let means: Vec<T> = totals.iter().map(|t| *t / nn).collect();
    let mut ss = vec![(T::zero(), T::zero()); nf];
    for (row, w) in buf.chunks_exact(nf).zip(weights) {
        for ((acc, y), m) in ss.iter_mut().zip(row).zip(&means) {
            let d = *w * *y - *m;
            neumaier_add(acc, d * d);
        }
    }
    let scale = nn / T::from_usize_lossy(n - 1);
    totals
        .into_iter()
        .zip(ss)
        .map(|(value, (s, c))| Estimate { value, stderr: ((s + c) * scale).sqrt(), samples: n })
        .collect()
}

#[inline]
fn neumaier_add<T: Real>(acc: &mut (T, T), v: T) {
    let (sum, c) = acc;
    let t = *sum + v;
    if sum.abs() >= v.abs() {
        *c += (*sum - t) + v;
    } else {
        *c += (v - t) + *sum;
    }
    *sum = t;
}

/// `φ_j` and `Kφ_j` at every particle, particle-major.
fn evaluate<T: Real>(bank: &CompiledBank<T>, positions: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let nf = bank.len();
    let n = positions.len() / d;
    let mut values = vec![T::zero(); n * nf];
    let mut gens = vec![T::zero(); n * nf];
    values
        .par_chunks_mut(nf)
        .zip(gens.par_chunks_mut(nf))
        .zip(positions.par_chunks(d))
        .for_each(|((v, g), col)| {
            bank.eval_and_kolmogorov_all(&DVector::from_column_slice(col), v, g);
        });
    (values, gens)
}

fn coordinate_moments<T: Real>(weights: &[T], positions: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let mass = compensated_sum(weights.iter().copied());
    let mut mean = vec![T::zero(); d];
    let mut variance = vec![T::zero(); d];
    if mass == T::zero() {
        return (mean, variance);
    }
    for r in 0..d {
        let row = positions.iter().skip(r).step_by(d);
        let m = compensated_sum(weights.iter().zip(row.clone()).map(|(w, v)| *w * *v)) / mass;
        let v = compensated_sum(weights.iter().zip(row.clone()).map(|(w, v)| *w * (*v - m) * (*v - m))) / mass;
        mean[r] = m;
        variance[r] = v;
    }
    (mean, variance)
}

/// Residual table for a stored trajectory. Snapshots must carry the same
/// particles in the same order (as produced by [`super::evolve`]), so the
/// per-particle residual is a path functional.
pub fn measure_equation_residual<T: Real>(
    trajectory: &MeasureTrajectory<T>,
    bank: &[TestFunction<T>],
    model: &GalerkinModel<T>,
) -> Result<MeasureResidual<T>> {
    check_grid(&trajectory.times)?;
    ensure!(
        trajectory.snapshots.len() == trajectory.times.len(),
        Contract,
        "{} snapshots for {} grid times",
        trajectory.snapshots.len(),
        trajectory.times.len()
    );
    let first = &trajectory.snapshots[0];
    ensure!(first.dim() == model.dim(), Contract, "trajectory and model dimensions differ");
    for s in &trajectory.snapshots {
        ensure!(
            s.len() == first.len() && s.dim() == first.dim() && s.weights() == first.weights(),
            Contract,
            "snapshots must share particle count and weights"
        );
    }
    ensure!(!bank.is_empty(), Input, "empty test-function bank");
    let compiled = CompiledBank::compile(model, bank)?;
    let d = first.dim();
    let mut acc = Accumulator::new(bank, first.weights());
    for (t, s) in trajectory.times.iter().zip(&trajectory.snapshots) {
        let pos = s.positions().as_slice();
        let (values, gens) = evaluate(&compiled, pos, d);
        acc.record(*t, &values, &gens, pos, d);
    }
    Ok(acc.table)
}

/// As [`measure_equation_residual`] on `evolve(handle, initial, times, seed)`,
/// without keeping the snapshots in memory.
pub fn measure_equation_residual_streaming<T: Real>(
    handle: &SemigroupHandle<T>,
    initial: &ParticleMeasure<T>,
    times: &[T],
    bank: &[TestFunction<T>],
    seed: u64,
) -> Result<MeasureResidual<T>> {
    ensure!(!bank.is_empty(), Input, "empty test-function bank");
    let compiled = CompiledBank::compile(handle.model(), bank)?;
    let d = initial.dim();
    let mut acc = Accumulator::new(bank, initial.weights());
    evolve_observed(handle, initial, times, seed, |k, pos| {
        let (values, gens) = evaluate(&compiled, pos.as_slice(), d);
        acc.record(times[k], &values, &gens, pos.as_slice(), d);
        Ok(())
    })?;
    Ok(acc.table)
}

/// Residual tables of one fine run and of the coarse runs nested in it.
#[derive(Clone, Debug)]
pub struct NestedRefinement<T: Real> {
    pub fine: MeasureResidual<T>,
    /// One table per disjoint particle group, on every other grid time.
    pub coarse: Vec<MeasureResidual<T>>,
}

impl<T: Real> NestedRefinement<T> {
    pub fn fine_median(&self) -> T {
        self.fine.median_residual()
    }

    /// Mean over the groups of each group's median residual.
    pub fn coarse_median(&self) -> T {
        let total = self.coarse.iter().fold(T::zero(), |a, c| a + c.median_residual());
        total / T::from_usize_lossy(self.coarse.len().max(1))
    }

    /// `fine_median / coarse_median`; below 1 when refinement helps.
    pub fn ratio(&self) -> T {
        let c = self.coarse_median();
        if c == T::zero() {
            T::zero()
        } else {
            self.fine_median() / c
        }
    }
}

/// Measure-equation residual under refinement by `groups`× particles and 2×
/// grid, from a single simulation. The fine run evolves `initial` on `fine_times`;
/// each coarse run is one of `groups` disjoint blocks of consecutive particles
/// (weights rescaled to the full mass) observed on every other grid time. Each
/// block is itself a run with `initial.len()/groups` particles on the coarse
/// grid, and the two levels share their randomness, so the comparison is not
/// at the mercy of independent fluctuations of the two medians.
pub fn measure_refinement_nested<T: Real>(
    handle: &SemigroupHandle<T>,
    initial: &ParticleMeasure<T>,
    fine_times: &[T],
    bank: &[TestFunction<T>],
    seed: u64,
    groups: usize,
) -> Result<NestedRefinement<T>> {
    ensure!(groups >= 1, Input, "need at least one coarse group");
    ensure!(!bank.is_empty(), Input, "empty test-function bank");
    ensure!(
        fine_times.len() >= 3 && (fine_times.len() - 1) % 2 == 0,
        Input,
        "fine grid needs an even number of steps"
    );
    let n = initial.len();
    ensure!(n % groups == 0, Input, "{n} particles do not split into {groups} groups");
    let block = n / groups;
    let compiled = CompiledBank::compile(handle.model(), bank)?;
    let nf = compiled.len();
    let d = initial.dim();
    let mass = initial.total_mass();
    let mut coarse = Vec::with_capacity(groups);
    for g in 0..groups {
        let w = &initial.weights()[g * block..(g + 1) * block];
        let sub = compensated_sum(w.iter().copied());
        ensure!(sub != T::zero(), Input, "particle group {g} has zero mass");
        let scaled: Vec<T> = w.iter().map(|x| *x * mass / sub).collect();
        coarse.push(Accumulator::new(bank, &scaled));
    }
    let mut fine = Accumulator::new(bank, initial.weights());
    evolve_observed(handle, initial, fine_times, seed, |k, pos| {
        let pos = pos.as_slice();
        let (values, gens) = evaluate(&compiled, pos, d);
        fine.record(fine_times[k], &values, &gens, pos, d);
        if k % 2 == 0 {
            for (g, acc) in coarse.iter_mut().enumerate() {
                let (a, b) = (g * block * nf, (g + 1) * block * nf);
                acc.record(fine_times[k], &values[a..b], &gens[a..b], &pos[g * block * d..(g + 1) * block * d], d);
            }
        }
        Ok(())
    })?;
    Ok(NestedRefinement { fine: fine.table, coarse: coarse.into_iter().map(|a| a.table).collect() })
}
