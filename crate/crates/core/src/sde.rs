//! Monte Carlo transition semigroup of the mild equation
//!
//! ```text
//! X(t) = e^{tA}x + ∫_0^t e^{(t−s)A} Q^{1/2} dW(s) + ∫_0^t e^{(t−s)A} F(X(s)) ds
//! ```
//!
//! discretised by exponential Euler with exact Gaussian increments:
//! `X_{k+1} = e^{δA}(X_k + δ F(X_k)) + ξ_k`, `ξ_k ~ N(0, Q_δ)`. With `F = 0` the
//! scheme is exact in law. Sample `i` always draws from random stream `i` of the
//! seed, so two simulations with the same seed share their noise pathwise.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::linalg::{check_dim, check_finite_vec, GaussianSampler};
use crate::model::GalerkinModel;
use crate::quadrature::gauss_hermite_normal;
use crate::rng::StreamRng;
use crate::scalar::Real;
use crate::stats::{Estimate, Welford};
use crate::testfn::{CompiledBank, TestFunction};

/// Paths are aborted once `|X| > BLOWUP_FACTOR · (1 + |x|)`.
pub const BLOWUP_FACTOR: f64 = 1e6;

/// Gauss–Hermite points per axis for deterministic Gaussian expectations.
pub const HERMITE_NODES: usize = 32;

/// Largest Gaussian rank integrated by tensor Gauss–Hermite.
pub const HERMITE_MAX_RANK: usize = 3;

/// How a [`SemigroupHandle`] evaluates `P_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method<T> {
    /// Closed-form Ornstein–Uhlenbeck transitions (requires `F = 0`).
    ExactOu,
    /// Exponential Euler with time step `dt`.
    MonteCarlo { dt: T },
}

/// Evaluator for `P_t φ(x) = E[φ(X(t,x))]` and sampler of `π_t(x, ·)`.
#[derive(Clone, Debug)]
pub struct SemigroupHandle<T: Real> {
    model: GalerkinModel<T>,
    method: Method<T>,
    samples: usize,
    seed: u64,
}

impl<T: Real> SemigroupHandle<T> {
    pub fn exact_ou(model: GalerkinModel<T>, samples: usize, seed: u64) -> Result<Self> {
        ensure!(model.is_ou(), Input, "exact Ornstein-Uhlenbeck handle requires F = 0");
        ensure!(samples >= 2, Input, "need at least two samples");
        Ok(Self { model, method: Method::ExactOu, samples, seed })
    }

    pub fn monte_carlo(model: GalerkinModel<T>, dt: T, samples: usize, seed: u64) -> Result<Self> {
        ensure!(dt.is_finite() && dt > T::zero(), Input, "time step must be positive, got {dt}");
        ensure!(samples >= 2, Input, "need at least two samples");
        Ok(Self { model, method: Method::MonteCarlo { dt }, samples, seed })
    }

    pub fn model(&self) -> &GalerkinModel<T> {
        &self.model
    }

    pub fn method(&self) -> Method<T> {
        self.method
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_exact(&self) -> bool {
        self.method == Method::ExactOu
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_samples(&self, samples: usize) -> Self {
        Self { samples: samples.max(2), ..self.clone() }
    }

    pub fn describe(&self) -> String {
        match self.method {
            Method::ExactOu => format!("exact-ou(d={}, samples={})", self.model.dim(), self.samples),
            Method::MonteCarlo { dt } => {
                format!("mc-sde(d={}, dt={dt}, samples={})", self.model.dim(), self.samples)
            }
        }
    }

    /// Stage plan covering `[0, span]`.
    pub fn schedule(&self, span: T) -> Result<Schedule<T>> {
        match self.method {
            Method::ExactOu => Schedule::exact(&self.model, span),
            Method::MonteCarlo { dt } => Schedule::stepped(&self.model, span, dt),
        }
    }

    /// `n` draws of `X(t, x)`; draw `i` uses stream `i` of `seed`.
    pub fn endpoints(&self, x: &DVector<T>, t: T, n: usize, seed: u64) -> Result<Vec<DVector<T>>> {
        check_start(&self.model, x, t)?;
        let schedule = self.schedule(t)?;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = StreamRng::new(seed, i as u64);
                schedule.run(&self.model, x, &mut rng)
            })
            .collect()
    }

    /// `P_t φ(x)`: deterministic for exact handles, Monte Carlo otherwise.
    pub fn transition_apply(&self, phi: &TestFunction<T>, t: T, x: &DVector<T>) -> Result<Estimate<T>> {
        let bank = CompiledBank::compile(&self.model, std::slice::from_ref(phi))?;
        self.transition_apply_compiled(&bank, 0, t, x)
    }

    pub fn transition_apply_compiled(
        &self,
        bank: &CompiledBank<T>,
        index: usize,
        t: T,
        x: &DVector<T>,
    ) -> Result<Estimate<T>> {
        check_start(&self.model, x, t)?;
        if t == T::zero() {
            return Ok(Estimate::exact(bank.eval(index, x)));
        }
        if bank.is_constant(index) {
            return Ok(Estimate::exact(bank.constant_term(index)));
        }
        match self.method {
            Method::ExactOu => {
                let et = self.model.semigroup(t);
                let qt = self.model.qt(t)?;
                Ok(Estimate::exact(bank.ou_transition(index, x, &et, qt.matrix())))
            }
            Method::MonteCarlo { .. } => {
                self.monte_carlo_mean(x, t, self.samples, self.seed, |y| bank.eval(index, y))
            }
        }
    }

    /// `P_{t_k}φ(x)` at nondecreasing times. Monte Carlo handles follow one path
    /// per sample through all times, so the estimates share their noise.
    pub fn transition_apply_many(
        &self,
        bank: &CompiledBank<T>,
        index: usize,
        times: &[T],
        x: &DVector<T>,
    ) -> Result<Vec<Estimate<T>>> {
        ensure!(
            times.windows(2).all(|w| w[1] >= w[0]),
            Input,
            "evaluation times must be nondecreasing"
        );
        if self.is_exact() || bank.is_constant(index) || times.is_empty() {
            return times.iter().map(|t| self.transition_apply_compiled(bank, index, *t, x)).collect();
        }
        check_start(&self.model, x, times[0])?;
        let mut gaps = Vec::with_capacity(times.len());
        let mut prev = T::zero();
        for &t in times {
            gaps.push(self.schedule(t - prev)?);
            prev = t;
        }
        let model = &self.model;
        let rows: Vec<Vec<T>> = (0..self.samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = StreamRng::new(self.seed, i as u64);
                let mut state = x.clone();
                gaps.iter()
                    .map(|g| {
                        state = g.run(model, &state, &mut rng)?;
                        Ok(bank.eval(index, &state))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok((0..times.len())
            .map(|k| {
                let mut acc = Welford::default();
                for r in &rows {
                    acc.push(r[k]);
                }
                acc.estimate()
            })
            .collect())
    }

    /// `P_t f(x)` for an arbitrary bounded function. Exact handles integrate by
    /// tensor Gauss–Hermite when `rank Q_t ≤ 3`, else sample.
    pub fn transition_apply_fn<F>(&self, f: F, t: T, x: &DVector<T>) -> Result<Estimate<T>>
    where
        F: Fn(&DVector<T>) -> T + Sync,
    {
        check_start(&self.model, x, t)?;
        if t == T::zero() {
            return Ok(Estimate::exact(f(x)));
        }
        if self.is_exact() {
            let qt = self.model.qt(t)?;
            let sampler = GaussianSampler::new(&qt)?;
            if sampler.rank() <= HERMITE_MAX_RANK {
                let mean = self.model.semigroup(t) * x;
                return Ok(Estimate::exact(gauss_hermite_expectation(&sampler, &mean, HERMITE_NODES, f)));
            }
        }
        self.monte_carlo_mean(x, t, self.samples, self.seed, f)
    }

    fn monte_carlo_mean<F>(&self, x: &DVector<T>, t: T, n: usize, seed: u64, f: F) -> Result<Estimate<T>>
    where
        F: Fn(&DVector<T>) -> T + Sync,
    {
        let schedule = self.schedule(t)?;
        let values: Vec<T> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = StreamRng::new(seed, i as u64);
                schedule.run(&self.model, x, &mut rng).map(|y| f(&y))
            })
            .collect::<Result<_>>()?;
        Ok(Estimate::from_samples(&values))
    }
}

fn check_start<T: Real>(model: &GalerkinModel<T>, x: &DVector<T>, t: T) -> Result<()> {
    check_dim(x, model.dim(), "x")?;
    check_finite_vec(x, "x")?;
    ensure!(t.is_finite() && t >= T::zero(), Input, "time must be finite and >= 0, got {t}");
    Ok(())
}

/// `E f(m + Y)`, `Y ~ N(0, C)`, by tensor Gauss–Hermite over the retained
/// eigen-directions of `C`.
pub fn gauss_hermite_expectation<T: Real, F>(sampler: &GaussianSampler<T>, mean: &DVector<T>, nodes: usize, f: F) -> T
where
    F: Fn(&DVector<T>) -> T,
{
    let r = sampler.rank();
    if r == 0 {
        return f(mean);
    }
    let (z, w) = gauss_hermite_normal(nodes);
    let total = nodes.pow(r as u32);
    let mut acc = T::zero();
    let mut idx = vec![0usize; r];
    let mut y = mean.clone();
    for _ in 0..total {
        y.copy_from(mean);
        let mut weight = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            weight *= w[i];
            y.axpy(T::lit(z[i]), &sampler.factor().column(k), T::one());
        }
        acc += T::lit(weight) * f(&y);
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < nodes {
                break;
            }
            *slot = 0;
        }
    }
    acc
}

/// One exponential-Euler stage of length `δ`: `x ↦ e^{δA}(x + δF(x)) + N(0, Q_δ)`.
#[derive(Clone, Debug)]
pub struct ExponentialEuler<T: Real> {
    step: T,
    propagator: nalgebra::DMatrix<T>,
    noise: GaussianSampler<T>,
    with_drift: bool,
}

impl<T: Real> ExponentialEuler<T> {
    pub fn new(model: &GalerkinModel<T>, step: T) -> Result<Self> {
        ensure!(step.is_finite() && step > T::zero(), Input, "stage length must be positive, got {step}");
        Ok(Self {
            step,
            propagator: model.semigroup(step),
            noise: GaussianSampler::new(&model.qt(step)?)?,
            with_drift: !model.is_ou(),
        })
    }

    pub fn step_size(&self) -> T {
        self.step
    }

    /// `e^{δA}`.
    pub fn propagator(&self) -> &nalgebra::DMatrix<T> {
        &self.propagator
    }

    pub fn noise(&self) -> &GaussianSampler<T> {
        &self.noise
    }

    /// `e^{δA}(x + δF(x))`.
    pub fn deterministic(&self, model: &GalerkinModel<T>, x: &DVector<T>) -> DVector<T> {
        if self.with_drift {
            let mut y = model.drift_at(x);
            y.scale_mut(self.step);
            y += x;
            &self.propagator * y
        } else {
            &self.propagator * x
        }
    }

    pub fn advance(&self, model: &GalerkinModel<T>, x: &DVector<T>, rng: &mut StreamRng) -> DVector<T> {
        let mut y = self.deterministic(model, x);
        self.noise.sample_add(rng, &mut y);
        y
    }

    /// Linearisation along the path: `η ↦ e^{δA}(η + δ DF(x)[η])`.
    pub fn tangent(&self, model: &GalerkinModel<T>, x: &DVector<T>, eta: &DVector<T>) -> DVector<T> {
        if self.with_drift {
            let mut y = model.drift_derivative(x, eta);
            y.scale_mut(self.step);
            y += eta;
            &self.propagator * y
        } else {
            &self.propagator * eta
        }
    }
}

/// Stages covering a time span: `count` repetitions of each stage, in order.
#[derive(Clone, Debug)]
pub struct Schedule<T: Real> {
    stages: Vec<(ExponentialEuler<T>, usize)>,
}

impl<T: Real> Schedule<T> {
    /// Full steps of `dt` followed by one partial step when `span/dt` is not integral.
    pub fn stepped(model: &GalerkinModel<T>, span: T, dt: T) -> Result<Self> {
        ensure!(span.is_finite() && span >= T::zero(), Input, "time span must be finite and >= 0, got {span}");
        ensure!(dt.is_finite() && dt > T::zero(), Input, "time step must be positive, got {dt}");
        let ratio = (span / dt).as_f64();
        let mut full = ratio.floor() as usize;
        let mut rem = span - dt * T::from_usize_lossy(full);
        let slack = T::tol(1e-12) * span.max(dt);
        if rem > dt - slack {
            full += 1;
            rem = T::zero();
        }
        let mut stages = Vec::new();
        if full > 0 {
            stages.push((ExponentialEuler::new(model, dt)?, full));
        }
        if rem > slack {
            stages.push((ExponentialEuler::new(model, rem)?, 1));
        }
        Ok(Self { stages })
    }

    /// A single exact stage (exact in law when `F = 0`).
    pub fn exact(model: &GalerkinModel<T>, span: T) -> Result<Self> {
        ensure!(span.is_finite() && span >= T::zero(), Input, "time span must be finite and >= 0, got {span}");
        if span == T::zero() {
            return Ok(Self { stages: Vec::new() });
        }
        Ok(Self { stages: vec![(ExponentialEuler::new(model, span)?, 1)] })
    }

    pub fn steps(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn stages(&self) -> impl Iterator<Item = &ExponentialEuler<T>> {
        self.stages.iter().flat_map(|(s, n)| std::iter::repeat_n(s, *n))
    }

    pub fn run(&self, model: &GalerkinModel<T>, x: &DVector<T>, rng: &mut StreamRng) -> Result<DVector<T>> {
        let mut state = x.clone();
        self.run_recording(model, &mut state, rng, x, |_, _| {})?;
        Ok(state)
    }

    /// Advances `state` in place; `record(k, state)` sees every intermediate state.
    pub fn run_recording(
        &self,
        model: &GalerkinModel<T>,
        state: &mut DVector<T>,
        rng: &mut StreamRng,
        origin: &DVector<T>,
        mut record: impl FnMut(usize, &DVector<T>),
    ) -> Result<()> {
        let limit = T::lit(BLOWUP_FACTOR) * (T::one() + origin.norm());
        for (k, stage) in self.stages().enumerate() {
            *state = stage.advance(model, state, rng);
            let norm = state.norm();
            if !(norm <= limit) {
                return Err(blow_up(k + 1, norm, limit));
            }
            record(k + 1, state);
        }
        Ok(())
    }

    /// Advances a path together with its first variation.
    pub fn run_tangent(
        &self,
        model: &GalerkinModel<T>,
        state: &mut DVector<T>,
        tangent: &mut DVector<T>,
        rng: &mut StreamRng,
    ) -> Result<()> {
        let limit = T::lit(BLOWUP_FACTOR) * (T::one() + state.norm());
        let tlimit = T::lit(BLOWUP_FACTOR) * (T::one() + tangent.norm());
        for (k, stage) in self.stages().enumerate() {
            let next_tangent = stage.tangent(model, state, tangent);
            *state = stage.advance(model, state, rng);
            *tangent = next_tangent;
            let (n, tn) = (state.norm(), tangent.norm());
            if !(n <= limit) {
                return Err(blow_up(k + 1, n, limit));
            }
            if !(tn <= tlimit) {
                return Err(blow_up(k + 1, tn, tlimit));
            }
        }
        Ok(())
    }
}

fn blow_up<T: Real>(step: usize, norm: T, limit: T) -> Error {
    Error::BlowUp(format!("|X| = {norm} exceeded {limit} at step {step}; check drift and growth constants"))
}

/// Ensemble of `n` draws of `X(T, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathState<T: Real> {
    pub time: T,
    pub positions: Vec<DVector<T>>,
    pub seed: u64,
}

/// Full sample paths on a common time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    pub times: Vec<T>,
    /// `paths[sample][step]`.
    pub paths: Vec<Vec<DVector<T>>>,
    pub seed: u64,
}

/// Exponential Euler up to `horizon` with step `dt` (last step partial).
pub fn simulate_mild<T: Real>(
    model: &GalerkinModel<T>,
    x: &DVector<T>,
    horizon: T,
    dt: T,
    n: usize,
    seed: u64,
) -> Result<PathState<T>> {
    ensure!(n >= 1, Input, "need at least one sample");
    check_start(model, x, horizon)?;
    let schedule = Schedule::stepped(model, horizon, dt)?;
    let positions = (0..n)
        .into_par_iter()
        .map(|i| schedule.run(model, x, &mut StreamRng::new(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathState { time: horizon, positions, seed })
}

/// As [`simulate_mild`], keeping every intermediate state.
pub fn simulate_mild_trajectory<T: Real>(
    model: &GalerkinModel<T>,
    x: &DVector<T>,
    horizon: T,
    dt: T,
    n: usize,
    seed: u64,
) -> Result<Trajectory<T>> {
    ensure!(n >= 1, Input, "need at least one sample");
    check_start(model, x, horizon)?;
    let schedule = Schedule::stepped(model, horizon, dt)?;
    let mut times = vec![T::zero()];
    let mut t = T::zero();
    for stage in schedule.stages() {
        t += stage.step_size();
        times.push(t);
    }
    if let Some(last) = times.last_mut() {
        if schedule.steps() > 0 {
            *last = horizon;
        }
    }
    let paths = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamRng::new(seed, i as u64);
            let mut state = x.clone();
            let mut path = Vec::with_capacity(times.len());
            path.push(x.clone());
            schedule.run_recording(model, &mut state, &mut rng, x, |_, s| path.push(s.clone()))?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { times, paths, seed })
}

impl<T: Real> Trajectory<T> {
    pub fn dim(&self) -> usize {
        self.paths.first().and_then(|p| p.first()).map_or(0, |v| v.len())
    }

    /// Columnar text: `sample,step,time,x_1,…,x_d`, values in shortest
    /// round-trip form.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        let mut header = String::from("sample,step,time");
        for k in 1..=d {
            header.push_str(&format!(",x_{k}"));
        }
        let io = |e| Error::io("trajectory csv", e);
        writeln!(out, "{header}").map_err(io)?;
        for (s, path) in self.paths.iter().enumerate() {
            for (k, state) in path.iter().enumerate() {
                let mut line = format!("{s},{k},{}", self.times[k]);
                for v in state.iter() {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(out, "{line}").map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, seed: u64) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty trajectory file".into()))?
            .map_err(|e| Error::io("trajectory csv", e))?;
        let cols: Vec<&str> = header.split(',').collect();
        ensure!(
            cols.len() >= 3 && cols[..3] == ["sample", "step", "time"],
            Format,
            "unexpected trajectory header `{header}`"
        );
        let d = cols.len() - 3;
        let mut times: Vec<T> = Vec::new();
        let mut paths: Vec<Vec<DVector<T>>> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("trajectory csv", e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            ensure!(fields.len() == d + 3, Format, "line {}: expected {} fields", lineno + 2, d + 3);
            let sample: usize = fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad sample index", lineno + 2)))?;
            let step: usize = fields[1]
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad step index", lineno + 2)))?;
            let time = parse_real::<T>(fields[2], lineno + 2)?;
            let state = fields[3..]
                .iter()
                .map(|f| parse_real::<T>(f, lineno + 2))
                .collect::<Result<Vec<_>>>()?;
            if sample == paths.len() {
                paths.push(Vec::new());
            }
            ensure!(sample + 1 == paths.len(), Format, "line {}: samples out of order", lineno + 2);
            ensure!(step == paths[sample].len(), Format, "line {}: steps out of order", lineno + 2);
            if sample == 0 {
                times.push(time);
            } else {
                ensure!(times.get(step) == Some(&time), Format, "line {}: time grid differs between samples", lineno + 2);
            }
            paths[sample].push(DVector::from_vec(state));
        }
        Ok(Self { times, paths, seed })
    }
}

pub(crate) fn parse_real<T: Real>(text: &str, line: usize) -> Result<T> {
    text.trim()
        .parse::<T>()
        .map_err(|_| Error::Format(format!("line {line}: `{text}` is not a number")))
}

/// One row of [`stochastic_continuity_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuityRow<T> {
    pub time: T,
    pub mean_square: T,
    pub stderr: T,
}

/// `E|X(t) − X(t₀)|²` for `t = t₀ + δ`, every `t` on the same coupled path.
pub fn stochastic_continuity_check<T: Real>(
    handle: &SemigroupHandle<T>,
    x: &DVector<T>,
    t0: T,
    offsets: &[T],
) -> Result<Vec<ContinuityRow<T>>> {
    check_start(handle.model(), x, t0)?;
    ensure!(
        offsets.iter().all(|d| d.is_finite() && *d >= T::zero()),
        Input,
        "offsets must be finite and >= 0"
    );
    // Visit t₀ and every requested time in increasing order along one path.
    let mut order: Vec<usize> = (0..offsets.len()).collect();
    order.sort_by(|&a, &b| offsets[a].partial_cmp(&offsets[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut gaps = Vec::with_capacity(order.len());
    let mut prev = T::zero();
    for &k in &order {
        gaps.push(handle.schedule(offsets[k] - prev)?);
        prev = offsets[k];
    }
    let to_start = handle.schedule(t0)?;
    let model = handle.model();
    let n = handle.samples();
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamRng::new(handle.seed(), i as u64);
            let start = to_start.run(model, x, &mut rng)?;
            let mut state = start.clone();
            let mut out = vec![T::zero(); offsets.len()];
            for (g, &k) in gaps.iter().zip(&order) {
                state = g.run(model, &state, &mut rng)?;
                out[k] = (&state - &start).norm_squared();
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(offsets
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let mut acc = Welford::default();
            for r in &rows {
                acc.push(r[k]);
            }
            let e = acc.estimate();
            ContinuityRow { time: t0 + *d, mean_square: e.value, stderr: e.stderr }
        })
        .collect())
}

/// A draw of `X(T, x)` together with its first variation `η^h(T, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentSample<T: Real> {
    pub position: DVector<T>,
    pub tangent: DVector<T>,
}

/// First variation `η^h` along the same simulated paths as [`simulate_mild`]
/// with the same seed.
pub fn first_variation<T: Real>(
    model: &GalerkinModel<T>,
    x: &DVector<T>,
    h: &DVector<T>,
    horizon: T,
    dt: T,
    n: usize,
    seed: u64,
) -> Result<Vec<TangentSample<T>>> {
    ensure!(n >= 1, Input, "need at least one sample");
    check_start(model, x, horizon)?;
    check_dim(h, model.dim(), "h")?;
    let schedule = Schedule::stepped(model, horizon, dt)?;
    tangent_samples(model, &schedule, x, h, n, seed)
}

fn tangent_samples<T: Real>(
    model: &GalerkinModel<T>,
    schedule: &Schedule<T>,
    x: &DVector<T>,
    h: &DVector<T>,
    n: usize,
    seed: u64,
) -> Result<Vec<TangentSample<T>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamRng::new(seed, i as u64);
            let mut position = x.clone();
            let mut tangent = h.clone();
            schedule.run_tangent(model, &mut position, &mut tangent, &mut rng)?;
            Ok(TangentSample { position, tangent })
        })
        .collect()
}

/// `⟨D P_t f(x), h⟩ = E⟨Df(X(t,x)), η^h(t,x)⟩`.
pub fn gradient_transition<T: Real>(
    handle: &SemigroupHandle<T>,
    f: &TestFunction<T>,
    t: T,
    x: &DVector<T>,
    h: &DVector<T>,
) -> Result<Estimate<T>> {
    check_start(handle.model(), x, t)?;
    check_dim(h, handle.model().dim(), "h")?;
    let bank = CompiledBank::compile(handle.model(), std::slice::from_ref(f))?;
    if t == T::zero() {
        return Ok(Estimate::exact(bank.gradient(0, x).dot(h)));
    }
    let schedule = handle.schedule(t)?;
    let samples = tangent_samples(handle.model(), &schedule, x, h, handle.samples(), handle.seed())?;
    let values: Vec<T> = samples
        .iter()
        .map(|s| bank.gradient(0, &s.position).dot(&s.tangent))
        .collect();
    Ok(Estimate::from_samples(&values))
}

/// Central difference `(f(X(t,x+εh)) − f(X(t,x−εh)))/(2ε)` with common noise.
pub fn coupled_difference<T: Real>(
    handle: &SemigroupHandle<T>,
    f: &TestFunction<T>,
    t: T,
    x: &DVector<T>,
    h: &DVector<T>,
    eps: T,
) -> Result<Estimate<T>> {
    check_start(handle.model(), x, t)?;
    check_dim(h, handle.model().dim(), "h")?;
    ensure!(eps > T::zero(), Input, "difference step must be positive");
    let bank = CompiledBank::compile(handle.model(), std::slice::from_ref(f))?;
    let schedule = handle.schedule(t)?;
    let plus = x + h * eps;
    let minus = x - h * eps;
    let model = handle.model();
    let values: Vec<T> = (0..handle.samples())
        .into_par_iter()
        .map(|i| {
            let yp = schedule.run(model, &plus, &mut StreamRng::new(handle.seed(), i as u64))?;
            let ym = schedule.run(model, &minus, &mut StreamRng::new(handle.seed(), i as u64))?;
            Ok((bank.eval(0, &yp) - bank.eval(0, &ym)) / (eps + eps))
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{CovarianceOperator, LinearOperator};
    use crate::model::DriftSpec;
    use crate::testfn::Part;

    fn ou1(a: f64, q: f64) -> GalerkinModel<f64> {
        GalerkinModel::ornstein_uhlenbeck(
            LinearOperator::from_row_slice(1, &[a]).unwrap(),
            CovarianceOperator::diagonal(&[q]).unwrap(),
        )
        .unwrap()
    }

    fn ou2() -> GalerkinModel<f64> {
        GalerkinModel::ornstein_uhlenbeck(
            LinearOperator::from_row_slice(2, &[-1.0, 0.4, -0.2, -0.6]).unwrap(),
            CovarianceOperator::new(nalgebra::DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn noiseless_linear_flow_is_deterministic() {
        let m = GalerkinModel::ornstein_uhlenbeck(
            LinearOperator::from_row_slice(2, &[-1.0, 2.0, -0.5, 0.3]).unwrap(),
            CovarianceOperator::zeros(2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.0, -0.5]);
        let ps = simulate_mild(&m, &x, 1.3, 0.1, 4, 1).unwrap();
        let exact = m.semigroup(1.3) * &x;
        for p in &ps.positions {
            assert!((p - &exact).amax() < 1e-12);
        }
    }

    #[test]
    fn partial_final_step() {
        let m = ou2();
        let s = Schedule::stepped(&m, 1.05, 0.1).unwrap();
        assert_eq!(s.steps(), 11);
        let total: f64 = s.stages().map(|st| st.step_size()).sum();
        assert!((total - 1.05).abs() < 1e-14);
        assert_eq!(Schedule::stepped(&m, 1.0, 0.1).unwrap().steps(), 10);
        assert_eq!(Schedule::stepped(&m, 0.0, 0.1).unwrap().steps(), 0);
    }

    #[test]
    fn ou_law_matches_gaussian() {
        let m = ou2();
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let horizon = 0.8;
        let n = 100_000;
        let ps = simulate_mild(&m, &x, horizon, 0.1, n, 5).unwrap();
        let mean_exact = m.semigroup(horizon) * &x;
        let cov_exact = m.qt(horizon).unwrap();
        let mut mean = DVector::zeros(2);
        for p in &ps.positions {
            mean += p;
        }
        mean /= n as f64;
        let mut cov = nalgebra::DMatrix::zeros(2, 2);
        for p in &ps.positions {
            let c = p - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        for k in 0..2 {
            let se = (cov_exact.matrix()[(k, k)] / n as f64).sqrt();
            assert!((mean[k] - mean_exact[k]).abs() < 3.0 * se);
            let rel = (cov[(k, k)] - cov_exact.matrix()[(k, k)]).abs() / cov_exact.matrix()[(k, k)];
            assert!(rel < 0.05);
        }
    }

    #[test]
    fn identical_seed_is_bit_identical() {
        let m = ou2().with_drift(DriftSpec::Tanh { scale: 0.5, coupling: None }.build(2).unwrap()).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let a = simulate_mild(&m, &x, 1.0, 0.05, 64, 77).unwrap();
        let b = simulate_mild(&m, &x, 1.0, 0.05, 64, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blow_up_is_reported() {
        let m = ou1(40.0, 1.0);
        let err = simulate_mild(&m, &DVector::from_vec(vec![1.0]), 1.0, 0.1, 2, 1).unwrap_err();
        assert!(matches!(err, Error::BlowUp(_)));
    }

    #[test]
    fn transition_trivial_cases() {
        let m = ou2().with_drift(DriftSpec::Tanh { scale: 0.5, coupling: None }.build(2).unwrap()).unwrap();
        let h = SemigroupHandle::monte_carlo(m.clone(), 0.1, 100, 3).unwrap();
        let x = DVector::from_vec(vec![0.5, 0.5]);
        let phi = TestFunction::cylindrical(vec![1.0, -0.5], Part::Real);
        let e0 = h.transition_apply(&phi, 0.0, &x).unwrap();
        assert_eq!(e0.value, crate::testfn::eval(&phi, &m, &x).unwrap());
        assert_eq!(e0.stderr, 0.0);
        let c = h.transition_apply(&TestFunction::constant(2.5), 0.7, &x).unwrap();
        assert_eq!((c.value, c.stderr), (2.5, 0.0));
    }

    #[test]
    fn exact_handle_rejects_drift() {
        let m = ou2().with_drift(DriftSpec::Tanh { scale: 0.5, coupling: None }.build(2).unwrap()).unwrap();
        assert!(SemigroupHandle::exact_ou(m, 10, 1).is_err());
    }

    #[test]
    fn continuity_brownian_variance() {
        let h = SemigroupHandle::monte_carlo(ou1(0.0, 1.0), 0.05, 20_000, 9).unwrap();
        let offsets = [0.0, 0.1, 0.25, 0.5];
        let rows = stochastic_continuity_check(&h, &DVector::from_vec(vec![0.3]), 0.0, &offsets).unwrap();
        assert_eq!(rows[0].mean_square, 0.0);
        for r in &rows[1..] {
            assert!((r.mean_square - r.time).abs() <= 3.0 * r.stderr, "{r:?}");
        }
    }

    #[test]
    fn first_variation_without_drift_is_linear_flow() {
        let m = ou2();
        let x = DVector::from_vec(vec![0.4, 0.0]);
        let h = DVector::from_vec(vec![1.0, 2.0]);
        let s = first_variation(&m, &x, &h, 0.9, 0.1, 8, 4).unwrap();
        let exact = m.semigroup(0.9) * &h;
        for t in &s {
            assert!((&t.tangent - &exact).amax() < 1e-12);
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let m = ou2();
        let x = DVector::from_vec(vec![0.123456789, -1.0 / 3.0]);
        let tr = simulate_mild_trajectory(&m, &x, 0.35, 0.1, 3, 8).unwrap();
        assert_eq!(tr.times.len(), 5);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample,step,time,x_1,x_2\n"));
        let back = Trajectory::<f64>::read_csv(std::io::Cursor::new(buf), 8).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn gauss_hermite_matches_characteristic_function() {
        let cov = CovarianceOperator::new(nalgebra::DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.3, 0.5])).unwrap();
        let sampler = GaussianSampler::new(&cov).unwrap();
        let mean: DVector<f64> = DVector::from_vec(vec![0.2, -0.4]);
        let h: DVector<f64> = DVector::from_vec(vec![1.1, 0.7]);
        let got = gauss_hermite_expectation(&sampler, &mean, 32, |y| h.dot(y).cos());
        let want = (-0.5 * cov.quadratic_form(&h)).exp() * h.dot(&mean).cos();
        assert!((got - want).abs() < 1e-12);
    }
}
