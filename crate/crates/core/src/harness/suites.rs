//! Verification suites. Each suite draws its random instances from streams of
//! a seed derived from the scenario seed and the suite, so suites can be run
//! alone or together with identical results.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{covariance_qt, expm_apply, CovarianceOperator, GaussianSampler, LinearOperator};
use crate::measure::{
    backward_pde_residual, backward_solution, bernstein_approx, cesaro_smooth, default_bank, dual_pushforward,
    duality_check, measure_equation_residual_streaming, measure_refinement_nested, resolvent_apply, resolvent_identity_residual,
    resolvent_threshold, uniform_grid, DualitySampling, MeasureResidual, ParticleMeasure,
};
use crate::model::GalerkinModel;
use crate::ou::{generator_quotient, ou_apply, ou_apply_quadrature, ou_exact_cyl, ou_shift_identity_check};
use crate::quadrature::{Rule, PANEL_ORDER};
use crate::rng::{derive_seed, StreamRng};
use crate::sde::{
    coupled_difference, first_variation, gradient_transition, simulate_mild, stochastic_continuity_check,
    SemigroupHandle, HERMITE_MAX_RANK,
};
use crate::testfn::{kolmogorov_apply, CompiledBank, Part, TestFunction};

use super::config::ScenarioConfig;
use super::report::{CheckRecord, Series};

/// Suites in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Suite {
    Linalg,
    OuExact,
    ShiftIdentity,
    Generator,
    DriftGenerator,
    Sde,
    MeasureEquation,
    MeasureRefinement,
    Stationary,
    Duality,
    Resolvent,
    FirstVariation,
    Backward,
    Approximation,
}

impl Suite {
    pub const ALL: [Suite; 14] = [
        Suite::Linalg,
        Suite::OuExact,
        Suite::ShiftIdentity,
        Suite::Generator,
        Suite::DriftGenerator,
        Suite::Sde,
        Suite::MeasureEquation,
        Suite::MeasureRefinement,
        Suite::Stationary,
        Suite::Duality,
        Suite::Resolvent,
        Suite::FirstVariation,
        Suite::Backward,
        Suite::Approximation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Linalg => "linalg",
            Suite::OuExact => "ou-exact",
            Suite::ShiftIdentity => "shift-identity",
            Suite::Generator => "generator",
            Suite::DriftGenerator => "drift-generator",
            Suite::Sde => "sde",
            Suite::MeasureEquation => "measure-equation",
            Suite::MeasureRefinement => "measure-refinement",
            Suite::Stationary => "stationary",
            Suite::Duality => "duality",
            Suite::Resolvent => "resolvent",
            Suite::FirstVariation => "first-variation",
            Suite::Backward => "backward",
            Suite::Approximation => "approximation",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|s| s.name()).collect()
    }
}

/// Every check identity with its default tolerance.
pub const IDENTITIES: &[(&str, f64)] = &[
    ("expm-semigroup-law", 1e-10),
    ("qt-decomposition", 1e-9),
    ("qt-refinement", 1e-10),
    ("growth-bound", 1e-12),
    ("ou-closed-form-mc", 0.05),
    ("ou-closed-form-quadrature", 1e-6),
    ("ou-semigroup-law", 1e-10),
    ("ou-contraction", 0.0),
    ("shift-identity", 1e-8),
    ("generator-quotient", 1e-2),
    ("generator-order", 0.15),
    ("drift-generator", 2e-2),
    ("continuity-zero", 0.0),
    ("continuity-monotone", 0.0),
    ("transition-contraction", 0.0),
    ("ou-law-mean", 0.0),
    ("ou-law-covariance", 0.05),
    ("measure-equation", 5e-3),
    ("measure-refinement", 1.0),
    ("stationary-lyapunov", 1e-12),
    ("stationary-generator", 0.0),
    ("duality-shared", 1e-12),
    ("duality-independent", 0.05),
    ("duality-constant", 1e-12),
    ("mass-conservation", 1e-12),
    ("tv-contraction", 1e-12),
    ("resolvent-constant", 1e-8),
    ("resolvent-bound", 1e-8),
    ("resolvent-identity", 5e-2),
    ("first-variation-bound", 1.0 + 1e-12),
    ("first-variation-fd", 1e-3),
    ("first-variation-linearity", 1e-10),
    ("gradient-transition", 1e-3),
    ("backward-terminal", 0.0),
    ("backward-constant", 1e-12),
    ("backward-lipschitz", 1e-8),
    ("backward-pde", 1e-3),
    ("bernstein-partition", 1e-12),
    ("bernstein-affine", 1e-12),
    ("bernstein-square", 1e-12),
    ("bernstein-monotone", 1e-12),
    ("cesaro-constant", 0.0),
    ("cesaro-rate", 0.2),
];

pub fn is_known_identity(name: &str) -> bool {
    IDENTITIES.iter().any(|(n, _)| *n == name)
}

fn default_tolerance(name: &str) -> f64 {
    IDENTITIES.iter().find(|(n, _)| *n == name).map_or(0.0, |(_, t)| *t)
}

/// Shared state of one suite run.
pub struct SuiteContext<'a> {
    pub config: &'a ScenarioConfig,
    pub model: GalerkinModel<f64>,
    pub x0: DVector<f64>,
    pub seed: u64,
    pub records: Vec<CheckRecord>,
    pub series: Vec<Series>,
}

impl<'a> SuiteContext<'a> {
    pub fn new(config: &'a ScenarioConfig, model: GalerkinModel<f64>, suite: Suite) -> Self {
        Self {
            config,
            model,
            x0: config.x0(),
            seed: derive_seed(config.run.seed, suite as u64),
            records: Vec::new(),
            series: Vec::new(),
        }
    }

    fn tol(&self, identity: &str) -> f64 {
        self.config.tolerance(identity, default_tolerance(identity))
    }

    fn rng(&self, stream: u64) -> StreamRng {
        StreamRng::new(self.seed, stream)
    }

    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn instances(&self) -> usize {
        self.config.run.instances
    }

    fn samples(&self) -> usize {
        self.config.run.samples
    }

    /// The model with its drift removed.
    fn ou_model(&self) -> Result<GalerkinModel<f64>> {
        GalerkinModel::ornstein_uhlenbeck(self.model.a().clone(), self.model.q().clone())
    }

    /// Exact for Ornstein–Uhlenbeck models, exponential Euler otherwise.
    fn handle(&self, seed: u64) -> Result<SemigroupHandle<f64>> {
        if self.model.is_ou() {
            SemigroupHandle::exact_ou(self.model.clone(), self.samples(), seed)
        } else {
            SemigroupHandle::monte_carlo(self.model.clone(), self.config.run.dt, self.samples(), seed)
        }
    }

    /// Runs one check; an error becomes a failed record and the run continues.
    fn check(&mut self, identity: &str, formula: &str, f: impl FnOnce(&mut Self) -> Result<CheckRecord>) {
        let record = match f(self) {
            Ok(r) => r,
            Err(e) => CheckRecord::failed(identity, formula, self.seed, e.to_string()),
        };
        self.records.push(record);
    }
}

fn unif(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    rng.uniform(lo, hi)
}

fn uniform_vec(rng: &mut StreamRng, d: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| unif(rng, lo, hi))
}

fn normal_vec(rng: &mut StreamRng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.normal())
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

pub fn run_suite(suite: Suite, ctx: &mut SuiteContext<'_>) {
    match suite {
        Suite::Linalg => linalg(ctx),
        Suite::OuExact => ou_exact(ctx),
        Suite::ShiftIdentity => shift_identity(ctx),
        Suite::Generator => generator(ctx),
        Suite::DriftGenerator => drift_generator(ctx),
        Suite::Sde => sde(ctx),
        Suite::MeasureEquation => measure_equation(ctx),
        Suite::MeasureRefinement => measure_refinement(ctx),
        Suite::Stationary => stationary(ctx),
        Suite::Duality => duality(ctx),
        Suite::Resolvent => resolvent(ctx),
        Suite::FirstVariation => first_variation_suite(ctx),
        Suite::Backward => backward(ctx),
        Suite::Approximation => approximation(ctx),
    }
}

fn linalg(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    ctx.check("expm-semigroup-law", "e^{(t+s)A}x = e^{tA}(e^{sA}x)", |c| {
        let mut rng = c.rng(0);
        let mut worst: f64 = 0.0;
        for _ in 0..c.instances() {
            let (t, s) = (unif(&mut rng, 0.0, 1.0), unif(&mut rng, 0.0, 1.0));
            let x = normal_vec(&mut rng, c.dim());
            let whole = expm_apply(c.model.a(), t + s, &x)?;
            let split = expm_apply(c.model.a(), t, &expm_apply(c.model.a(), s, &x)?)?;
            worst = worst.max((&whole - &split).norm() / (1.0 + whole.norm()));
        }
        Ok(CheckRecord::deterministic("expm-semigroup-law", "e^{(t+s)A}x = e^{tA}(e^{sA}x)", worst, c.tol("expm-semigroup-law"), seed))
    });
    ctx.check("qt-decomposition", "Q_{t+s} = Q_s + e^{sA} Q_t e^{sA*}", |c| {
        let mut rng = c.rng(1);
        let mut worst: f64 = 0.0;
        for _ in 0..c.instances() {
            let (t, s) = (unif(&mut rng, 0.0, 1.0), unif(&mut rng, 0.0, 1.0));
            let es = c.model.semigroup(s);
            let rhs = c.model.qt(s)?.matrix() + &es * c.model.qt(t)?.matrix() * es.transpose();
            worst = worst.max(max_abs(&(c.model.qt(t + s)?.matrix() - rhs)));
        }
        Ok(CheckRecord::deterministic("qt-decomposition", "Q_{t+s} = Q_s + e^{sA} Q_t e^{sA*}", worst, c.tol("qt-decomposition"), seed))
    });
    ctx.check("qt-refinement", "Q_t = ∫_0^t e^{sA} Q e^{sA*} ds", |c| {
        let t = c.config.run.horizon;
        let coarse = covariance_qt(c.model.a(), c.model.q(), t, 64)?;
        let fine = covariance_qt(c.model.a(), c.model.q(), t, 128)?;
        let r = max_abs(&(coarse.matrix() - fine.matrix()));
        Ok(CheckRecord::deterministic("qt-refinement", "Q_t = ∫_0^t e^{sA} Q e^{sA*} ds", r, c.tol("qt-refinement"), seed)
            .with_note("64 vs 128 Gauss-Legendre panels"))
    });
    ctx.check("growth-bound", "‖e^{tA}‖ ≤ M e^{ωt}", |c| {
        let mut worst: f64 = 0.0;
        for k in 0..=20 {
            let t = 0.1 * k as f64;
            let norm = crate::linalg::operator_norm(&c.model.semigroup(t));
            worst = worst.max(norm / c.model.growth_bound(t) - 1.0);
        }
        Ok(CheckRecord::deterministic("growth-bound", "‖e^{tA}‖ ≤ M e^{ωt}", worst.max(0.0), c.tol("growth-bound"), seed)
            .with_note("relative excess over the bound on t = 0, 0.1, ..., 2"))
    });
}

const CYL_FORMULA: &str = "R_t e^{i<.,h>}(x) = exp(i<e^{tA}x,h> - 1/2 <Q_t h,h>)";

fn ou_exact(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    ctx.check("ou-closed-form-mc", CYL_FORMULA, |c| {
        let ou = c.ou_model()?;
        let mut rng = c.rng(0);
        let mut misses = 0usize;
        let mut contraction: f64 = 0.0;
        for i in 0..c.instances() {
            let t = unif(&mut rng, 0.0, 2.0);
            let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
            let x = normal_vec(&mut rng, c.dim());
            let part = if i % 2 == 0 { Part::Real } else { Part::Imaginary };
            let exact = part.of(ou_exact_cyl(&ou, t, &h, &x)?);
            let phi = TestFunction::cylindrical(h.as_slice().to_vec(), part);
            let mc = ou_apply(&ou, t, &phi, &x, c.samples(), derive_seed(seed, i as u64))?;
            if (mc.value - exact).abs() > 3.0 * mc.stderr {
                misses += 1;
            }
            contraction = contraction.max(mc.value.abs() - 1.0 - 3.0 * mc.stderr);
        }
        c.records.push(CheckRecord::deterministic(
            "ou-contraction",
            "|R_t φ(x)| ≤ ‖φ‖_∞",
            contraction.max(0.0),
            c.tol("ou-contraction"),
            seed,
        ).with_note("excess of |estimate| over ‖φ‖_∞ + 3·stderr"));
        let fraction = misses as f64 / c.instances() as f64;
        Ok(CheckRecord::deterministic("ou-closed-form-mc", CYL_FORMULA, fraction, c.tol("ou-closed-form-mc"), seed)
            .with_note(format!("fraction of {} instances outside 3·stderr", c.instances())))
    });
    ctx.check("ou-closed-form-quadrature", CYL_FORMULA, |c| {
        let ou = c.ou_model()?;
        let mut rng = c.rng(1);
        let mut worst: f64 = 0.0;
        let mut used = 0;
        for _ in 0..c.instances() {
            let t = unif(&mut rng, 0.0, 2.0);
            let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
            let x = normal_vec(&mut rng, c.dim());
            if GaussianSampler::new(&ou.qt(t)?)?.rank() > HERMITE_MAX_RANK {
                continue;
            }
            used += 1;
            let exact = ou_exact_cyl(&ou, t, &h, &x)?;
            for part in [Part::Real, Part::Imaginary] {
                let phi = TestFunction::cylindrical(h.as_slice().to_vec(), part);
                let gh = ou_apply_quadrature(&ou, t, &phi, &x, crate::sde::HERMITE_NODES)?;
                worst = worst.max((gh - part.of(exact)).abs());
            }
        }
        let mut r = CheckRecord::deterministic("ou-closed-form-quadrature", CYL_FORMULA, worst, c.tol("ou-closed-form-quadrature"), seed);
        if used == 0 {
            r = r.with_note("no instance with rank Q_t <= 3; nothing to compare");
        }
        Ok(r)
    });
    ctx.check("ou-semigroup-law", "R_{t+s} e_h = R_t R_s e_h", |c| {
        let ou = c.ou_model()?;
        let mut rng = c.rng(2);
        let mut worst: f64 = 0.0;
        for _ in 0..c.instances() {
            let (t, s) = (unif(&mut rng, 0.0, 1.0), unif(&mut rng, 0.0, 1.0));
            let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
            let x = normal_vec(&mut rng, c.dim());
            let lhs = ou_exact_cyl(&ou, t + s, &h, &x)?;
            let hs = ou.a().adjoint().exp(s) * &h;
            let rhs = ou_exact_cyl(&ou, t, &hs, &x)? * (-0.5 * ou.qt(s)?.quadratic_form(&h)).exp();
            worst = worst.max((lhs - rhs).re.hypot((lhs - rhs).im));
        }
        Ok(CheckRecord::deterministic("ou-semigroup-law", "R_{t+s} e_h = R_t R_s e_h", worst, c.tol("ou-semigroup-law"), seed))
    });
}

fn shift_identity(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let formula = "R_t φ_{a,h} = φ_{a+t,h} - φ_{t,h}";
    ctx.check("shift-identity", formula, |c| {
        let ou = c.ou_model()?;
        let mut rng = c.rng(0);
        let mut worst: f64 = 0.0;
        for _ in 0..c.instances() {
            let a = unif(&mut rng, 0.2, 1.5);
            let t = unif(&mut rng, 0.05, 1.0);
            let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
            let x = normal_vec(&mut rng, c.dim());
            worst = worst.max(ou_shift_identity_check(&ou, t, a, &h, &x)?);
        }
        Ok(CheckRecord::deterministic("shift-identity", formula, worst, c.tol("shift-identity"), seed))
    });
}

fn random_ou_integral(rng: &mut StreamRng, d: usize, i: usize) -> TestFunction<f64> {
    let a = unif(rng, 0.2, 1.5);
    let h: Vec<f64> = (0..d).map(|_| unif(rng, -1.0, 1.0)).collect();
    let part = if i % 2 == 0 { Part::Real } else { Part::Imaginary };
    TestFunction::ou_integral(a, h, part)
}

fn generator(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let quotient = "lim (R_t φ - φ)/t = e^{i<e^{aA}x,h> - 1/2<Q_a h,h>} - e^{i<x,h>} = K_0 φ";
    ctx.check("generator-quotient", quotient, |c| {
        let ou = c.ou_model()?;
        let handle = SemigroupHandle::exact_ou(ou.clone(), c.samples(), seed)?;
        let mut rng = c.rng(0);
        let (mut worst, mut ratio_dev): (f64, f64) = (0.0, 0.0);
        let mut series = Series::new("generator_quotient", &["t", "quotient", "closed_form", "abs_error"]);
        for i in 0..c.instances() {
            let phi = random_ou_integral(&mut rng, c.dim(), i);
            let x = normal_vec(&mut rng, c.dim());
            let k0 = kolmogorov_apply(&phi, &ou, &x)?;
            let e1 = (generator_quotient(&handle, &phi, &x, 1e-3)?.value - k0).abs();
            let e2 = (generator_quotient(&handle, &phi, &x, 5e-4)?.value - k0).abs();
            worst = worst.max(e1);
            ratio_dev = ratio_dev.max((e2 / e1 - 0.5).abs());
            if i == 0 {
                for k in 0..12 {
                    let t = 0.1 * 0.5f64.powi(k);
                    let q = generator_quotient(&handle, &phi, &x, t)?.value;
                    series.push(vec![t, q, k0, (q - k0).abs()]);
                }
            }
        }
        c.series.push(series);
        c.records.push(
            CheckRecord::deterministic("generator-order", "|(R_tφ-φ)/t - K_0φ| = O(t)", ratio_dev, c.tol("generator-order"), seed)
                .with_note("largest |error(t/2)/error(t) - 0.5| at t = 1e-3"),
        );
        Ok(CheckRecord::deterministic("generator-quotient", quotient, worst, c.tol("generator-quotient"), seed)
            .with_note("t = 1e-3"))
    });
}

fn drift_generator(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let formula = "Kφ = Lφ + <Dφ, F>";
    ctx.check("drift-generator", formula, |c| {
        let t = 1e-2;
        let handle = SemigroupHandle::monte_carlo(c.model.clone(), t, c.samples(), seed)?;
        let mut rng = c.rng(0);
        let mut worst: Option<(f64, f64)> = None;
        for i in 0..c.instances().min(10) {
            let phi = random_ou_integral(&mut rng, c.dim(), i);
            let x = normal_vec(&mut rng, c.dim());
            let phi = phi.refine_nodes(&c.model, std::slice::from_ref(&x), 8, 1e-10)?;
            let k0 = kolmogorov_apply(&phi, &c.model, &x)?;
            let q = generator_quotient(&handle.with_seed(derive_seed(seed, i as u64)), &phi, &x, t)?;
            let err = (q.value - k0).abs();
            if worst.is_none_or(|(e, s)| err - 3.0 * q.stderr > e - 3.0 * s) {
                worst = Some((err, q.stderr));
            }
        }
        let (err, se) = worst.unwrap_or((0.0, 0.0));
        Ok(CheckRecord::stochastic("drift-generator", formula, err, se, c.tol("drift-generator"), seed)
            .with_note("worst of up to 10 instances, t = 1e-2, one exponential-Euler step"))
    });
}

fn sde(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let formula = "lim_{t→t0} E|X(t,x) - X(t0,x)|^2 = 0";
    ctx.check("continuity-zero", formula, |c| {
        let handle = SemigroupHandle::monte_carlo(c.model.clone(), c.config.run.dt, c.samples(), seed)?;
        let deltas: Vec<f64> = (0..=8).map(|k| if k == 0 { 0.0 } else { 0.4 * 0.5f64.powi(8 - k) }).collect();
        let rows = stochastic_continuity_check(&handle, &c.x0, 0.25, &deltas)?;
        let mut series = Series::new("continuity", &["delta", "mean_square", "stderr"]);
        let mut worst_drop: f64 = 0.0;
        for (k, r) in rows.iter().enumerate() {
            series.push(vec![deltas[k], r.mean_square, r.stderr]);
            if k > 0 {
                let prev = &rows[k - 1];
                let allowance = 3.0 * prev.stderr.hypot(r.stderr);
                worst_drop = worst_drop.max(prev.mean_square - r.mean_square - allowance);
            }
        }
        c.series.push(series);
        c.records.push(CheckRecord::deterministic(
            "continuity-monotone",
            formula,
            worst_drop.max(0.0),
            c.tol("continuity-monotone"),
            seed,
        ).with_note("largest decrease of E|X(t0+δ)-X(t0)|^2 in δ beyond 3·stderr"));
        Ok(CheckRecord::deterministic("continuity-zero", formula, rows[0].mean_square, c.tol("continuity-zero"), seed))
    });
    ctx.check("transition-contraction", "|P_t φ(x)| ≤ ‖φ‖_∞", |c| {
        let handle = SemigroupHandle::monte_carlo(c.model.clone(), c.config.run.dt, c.samples(), seed)?;
        let mut rng = c.rng(1);
        let mut worst: f64 = f64::NEG_INFINITY;
        for i in 0..c.instances().min(10) {
            let h = uniform_vec(&mut rng, c.dim(), -2.0, 2.0);
            let phi = TestFunction::cylindrical(h.as_slice().to_vec(), Part::Real);
            let e = handle.with_seed(derive_seed(seed, i as u64)).transition_apply(&phi, 0.5, &c.x0)?;
            worst = worst.max(e.value.abs() - 1.0 - 3.0 * e.stderr);
        }
        Ok(CheckRecord::deterministic("transition-contraction", "|P_t φ(x)| ≤ ‖φ‖_∞", worst.max(0.0), c.tol("transition-contraction"), seed))
    });
    if ctx.model.is_ou() {
        let law = "X(t,x) ~ N(e^{tA}x, Q_t) when F = 0";
        ctx.check("ou-law-mean", law, |c| {
            let t = c.config.run.horizon;
            let ps = simulate_mild(&c.model, &c.x0, t, c.config.run.dt, c.samples(), seed)?;
            let mu = ParticleMeasure::empirical(&ps.positions, "endpoints")?;
            let (mean, cov) = (mu.mean(), mu.covariance());
            let (want_mean, want_cov) = (c.model.semigroup(t) * &c.x0, c.model.qt(t)?);
            let n = c.samples() as f64;
            let mut worst: Option<(f64, f64)> = None;
            let mut rel: f64 = 0.0;
            for k in 0..c.dim() {
                let var = want_cov.matrix()[(k, k)];
                let (err, se) = ((mean[k] - want_mean[k]).abs(), (var / n).sqrt());
                if worst.is_none_or(|(e, s)| err - 3.0 * se > e - 3.0 * s) {
                    worst = Some((err, se));
                }
                if var > 0.0 {
                    rel = rel.max((cov[(k, k)] - var).abs() / var);
                }
            }
            c.records.push(CheckRecord::deterministic("ou-law-covariance", law, rel, c.tol("ou-law-covariance"), seed)
                .with_note("largest relative error of the diagonal covariance"));
            let (err, se) = worst.unwrap_or((0.0, 0.0));
            Ok(CheckRecord::stochastic("ou-law-mean", law, err, se, c.tol("ou-law-mean"), seed))
        });
    }
}

const MEASURE_FORMULA: &str = "∫φ dμ_t - ∫φ dμ_0 = ∫_0^t ∫Kφ dμ_s ds";

fn bank_probes(model: &GalerkinModel<f64>, x0: &DVector<f64>) -> Vec<DVector<f64>> {
    vec![x0.clone(), model.semigroup(1.0) * x0, DVector::zeros(x0.len())]
}

fn residual_series(table: &MeasureResidual<f64>, dim: usize, out: &mut Vec<Series>) {
    let mut res = Series::new("measure_residual", &["t", "max_residual", "median_residual"]);
    for (k, t) in table.times.iter().enumerate() {
        let mut row: Vec<f64> = table.residual[k].iter().map(|e| e.value).collect();
        row.sort_by(f64::total_cmp);
        let median = if row.is_empty() { 0.0 } else { row[row.len() / 2] };
        res.push(vec![*t, row.last().copied().unwrap_or(0.0), median]);
    }
    out.push(res);
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=dim).map(|k| format!("mean_{k}")));
    columns.extend((1..=dim).map(|k| format!("var_{k}")));
    let cols: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    let mut mom = Series::new("measure_moments", &cols);
    for (k, t) in table.times.iter().enumerate() {
        let mut row = vec![*t];
        row.extend(&table.mean[k]);
        row.extend(&table.variance[k]);
        mom.push(row);
    }
    out.push(mom);
}

fn measure_table(c: &SuiteContext<'_>, particles: usize, steps: usize) -> Result<MeasureResidual<f64>> {
    let handle = c.handle(c.seed)?;
    let bank = default_bank(&c.model, c.seed, &bank_probes(&c.model, &c.x0))?;
    let mu = ParticleMeasure::dirac(&c.x0, particles)?;
    let times = uniform_grid(c.config.run.horizon, steps);
    measure_equation_residual_streaming(&handle, &mu, &times, &bank, c.seed)
}

fn measure_equation(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let table = match measure_table(ctx, ctx.config.run.particles, ctx.config.run.grid_steps) {
        Ok(t) => t,
        Err(e) => {
            ctx.records.push(CheckRecord::failed("measure-equation", MEASURE_FORMULA, seed, e.to_string()));
            return;
        }
    };
    let tol = ctx.tol("measure-equation");
    for (j, name) in table.functions.iter().enumerate() {
        let (mut worst, mut se) = (0.0f64, 0.0);
        for row in &table.residual {
            if row[j].value >= worst {
                worst = row[j].value;
                se = row[j].stderr;
            }
        }
        let mut r = CheckRecord::deterministic(&format!("measure-equation[{j}]"), MEASURE_FORMULA, worst, tol, seed)
            .with_note(format!("{name}; max over the grid"));
        r.stderr = Some(se);
        ctx.records.push(r);
    }
    residual_series(&table, ctx.dim(), &mut ctx.series);
}

fn measure_refinement(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    ctx.check("measure-refinement", MEASURE_FORMULA, |c| {
        let (n, k) = (c.config.run.particles, c.config.run.grid_steps);
        let handle = c.handle(seed)?;
        let bank = default_bank(&c.model, seed, &bank_probes(&c.model, &c.x0))?;
        let mu = ParticleMeasure::dirac(&c.x0, 4 * n)?;
        let out = measure_refinement_nested(&handle, &mu, &uniform_grid(c.config.run.horizon, 2 * k), &bank, seed, 4)?;
        Ok(CheckRecord::deterministic("measure-refinement", MEASURE_FORMULA, out.ratio(), c.tol("measure-refinement"), seed)
            .with_note(format!(
                "median residual {:e} (mean over 4 nested runs of {n} particles, {k} steps) -> {:e} ({} particles, {} steps)",
                out.coarse_median(),
                out.fine_median(),
                4 * n,
                2 * k
            )))
    });
}

fn stationary(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let d = ctx.dim();
    let lyapunov = "AΣ + ΣA* + Q = 0 with A = -I, Q = 2I, Σ = I";
    ctx.check("stationary-lyapunov", lyapunov, |c| {
        let a = -DMatrix::<f64>::identity(d, d);
        let sigma = DMatrix::<f64>::identity(d, d);
        let r = max_abs(&(&a * &sigma + &sigma * a.transpose() + DMatrix::identity(d, d) * 2.0));
        Ok(CheckRecord::deterministic("stationary-lyapunov", lyapunov, r, c.tol("stationary-lyapunov"), seed))
    });
    let formula = "∫K_0 φ dμ = 0 for the invariant μ = N(0, I)";
    let outcome = (|| -> Result<MeasureResidual<f64>> {
        let model = GalerkinModel::ornstein_uhlenbeck(
            LinearOperator::scaled_identity(d, -1.0),
            CovarianceOperator::new(DMatrix::identity(d, d) * 2.0)?,
        )?;
        let handle = SemigroupHandle::exact_ou(model.clone(), ctx.samples(), seed)?;
        let mu = ParticleMeasure::gaussian(&DVector::zeros(d), &CovarianceOperator::identity(d), ctx.config.run.particles, seed)?;
        let probes = vec![DVector::zeros(d), DVector::from_element(d, 1.0), DVector::from_element(d, -1.0)];
        let bank = default_bank(&model, seed, &probes)?;
        let times = uniform_grid(ctx.config.run.horizon, ctx.config.run.grid_steps);
        measure_equation_residual_streaming(&handle, &mu, &times, &bank, derive_seed(seed, 1))
    })();
    let table = match outcome {
        Ok(t) => t,
        Err(e) => {
            ctx.records.push(CheckRecord::failed("stationary-generator", formula, seed, e.to_string()));
            return;
        }
    };
    let slack = ctx.tol("stationary-generator");
    let mut series = Series::new("stationary_generator", &["t", "max_abs_generator_mean", "max_stderr"]);
    for (k, t) in table.times.iter().enumerate() {
        let m = table.generator[k].iter().fold(0.0f64, |a, e| a.max(e.value.abs()));
        let s = table.generator[k].iter().fold(0.0f64, |a, e| a.max(e.stderr));
        series.push(vec![*t, m, s]);
    }
    ctx.series.push(series);
    for (j, name) in table.functions.iter().enumerate() {
        let (mut worst, mut se) = (f64::NEG_INFINITY, 0.0);
        for row in &table.generator {
            let e = row[j];
            if e.value.abs() - 3.0 * e.stderr > worst - 3.0 * se {
                worst = e.value.abs();
                se = e.stderr;
            }
        }
        ctx.records.push(
            CheckRecord::stochastic(&format!("stationary-generator[{j}]"), formula, worst, se, slack, seed)
                .with_note(format!("{name}; worst grid time")),
        );
    }
}

fn random_probability(rng: &mut StreamRng, d: usize, n: usize) -> Result<ParticleMeasure<f64>> {
    let points: Vec<DVector<f64>> = (0..n).map(|_| normal_vec(rng, d)).collect();
    let raw: Vec<f64> = (0..n).map(|_| unif(rng, 0.1, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    ParticleMeasure::from_points(&points, raw.iter().map(|w| w / total).collect(), "random")
}

fn duality(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let formula = "<φ, P_t* μ> = <P_t φ, μ>";
    let per_particle = |c: &SuiteContext<'_>, n: usize| (c.samples() / n).max(2);
    ctx.check("duality-shared", formula, |c| {
        let handle = c.handle(seed)?;
        let mut rng = c.rng(0);
        let mu = random_probability(&mut rng, c.dim(), 5)?;
        let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
        let phi = TestFunction::cylindrical(h.as_slice().to_vec(), Part::Real);
        let out = duality_check(&handle, &phi, &mu, 0.5, per_particle(c, 5), seed, DualitySampling::Shared)?;
        Ok(CheckRecord::deterministic("duality-shared", formula, out.residual, c.tol("duality-shared"), seed))
    });
    ctx.check("duality-independent", formula, |c| {
        let handle = c.handle(seed)?;
        let mut rng = c.rng(1);
        let mut misses = 0;
        for i in 0..c.instances() {
            let mu = random_probability(&mut rng, c.dim(), 5)?;
            let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
            let t = unif(&mut rng, 0.1, 1.0);
            let phi = TestFunction::cylindrical(h.as_slice().to_vec(), Part::Real);
            let s = derive_seed(seed, i as u64);
            let out = duality_check(&handle, &phi, &mu, t, per_particle(c, 5), s, DualitySampling::Independent { seed: !s })?;
            if out.residual > 3.0 * out.combined_stderr {
                misses += 1;
            }
        }
        let fraction = misses as f64 / c.instances() as f64;
        Ok(CheckRecord::deterministic("duality-independent", formula, fraction, c.tol("duality-independent"), seed)
            .with_note(format!("fraction of {} trials outside 3·combined stderr", c.instances())))
    });
    ctx.check("duality-constant", formula, |c| {
        let handle = c.handle(seed)?;
        let mu = random_probability(&mut c.rng(2), c.dim(), 5)?;
        let out = duality_check(&handle, &TestFunction::constant(1.5), &mu, 0.5, 4, seed, DualitySampling::Independent { seed: !seed })?;
        let r = (out.pushforward.value - 1.5).abs().max((out.transition.value - 1.5).abs());
        Ok(CheckRecord::deterministic("duality-constant", formula, r, c.tol("duality-constant"), seed))
    });
    ctx.check("mass-conservation", "P_t* maps probabilities to probabilities", |c| {
        let handle = c.handle(seed)?;
        let mu = random_probability(&mut c.rng(3), c.dim(), 5)?;
        let pushed = dual_pushforward(&handle, &mu, 0.5, per_particle(c, 5), seed)?;
        let r = (pushed.total_mass() - 1.0).abs();
        let pass_sign = pushed.weights().iter().all(|w| *w >= 0.0);
        let r = if pass_sign { r } else { f64::INFINITY };
        Ok(CheckRecord::deterministic("mass-conservation", "P_t* maps probabilities to probabilities", r, c.tol("mass-conservation"), seed))
    });
    ctx.check("tv-contraction", "‖P_t* μ‖_TV ≤ ‖μ‖_TV", |c| {
        let handle = c.handle(seed)?;
        let mut rng = c.rng(4);
        let points: Vec<DVector<f64>> = (0..6).map(|_| normal_vec(&mut rng, c.dim())).collect();
        let weights: Vec<f64> = (0..6).map(|_| unif(&mut rng, -1.0, 1.0)).collect();
        let mu = ParticleMeasure::from_points(&points, weights, "signed")?;
        let pushed = dual_pushforward(&handle, &mu, 0.5, 16, seed)?;
        let r = (pushed.total_variation() - mu.total_variation()).max(0.0);
        Ok(CheckRecord::deterministic("tv-contraction", "‖P_t* μ‖_TV ≤ ‖μ‖_TV", r, c.tol("tv-contraction"), seed)
            .with_note("total variation measured by the l1 norm of the weights, an upper bound"))
    });
}

const RESOLVENT_PANELS: usize = 64;
const RESOLVENT_TAIL: f64 = 1e-9;

fn resolvent(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let formula = "R(λ,K)f(x) = ∫_0^∞ e^{-λt} P_t f(x) dt";
    let lambda = |c: &SuiteContext<'_>, h: &SemigroupHandle<f64>| c.config.run.lambda.unwrap_or(resolvent_threshold(h) + 1.0);
    ctx.check("resolvent-constant", formula, |c| {
        let handle = c.handle(seed)?;
        let l = lambda(c, &handle);
        let r = resolvent_apply(&handle, l, &TestFunction::constant(2.0), &c.x0, RESOLVENT_TAIL, RESOLVENT_PANELS)?;
        Ok(CheckRecord::deterministic("resolvent-constant", "R(λ,K)c = c/λ", (r.value - 2.0 / l).abs(), c.tol("resolvent-constant"), seed))
    });
    ctx.check("resolvent-bound", "‖R(λ,K)f‖ ≤ ‖f‖/λ", |c| {
        let handle = c.handle(seed)?;
        let l = lambda(c, &handle);
        let mut rng = c.rng(0);
        let mut worst: Option<(f64, f64)> = None;
        for i in 0..c.instances() {
            let h = uniform_vec(&mut rng, c.dim(), -2.0, 2.0);
            let x = normal_vec(&mut rng, c.dim());
            let part = if i % 2 == 0 { Part::Real } else { Part::Imaginary };
            let f = TestFunction::cylindrical(h.as_slice().to_vec(), part);
            let r = resolvent_apply(&handle, l, &f, &x, RESOLVENT_TAIL, RESOLVENT_PANELS)?;
            let excess = r.value.abs() - 1.0 / l;
            if worst.is_none_or(|(e, s)| excess - 3.0 * r.stderr > e - 3.0 * s) {
                worst = Some((excess, r.stderr));
            }
        }
        let (excess, se) = worst.unwrap_or((0.0, 0.0));
        Ok(CheckRecord::stochastic("resolvent-bound", "‖R(λ,K)f‖ ≤ ‖f‖/λ", excess.max(0.0), se, c.tol("resolvent-bound"), seed))
    });
    ctx.check("resolvent-identity", "(λ - K) R(λ,K) f = f", |c| {
        // The difference quotient needs the exact semigroup; with a drift the
        // check runs on the Ornstein-Uhlenbeck part of the model.
        let ou = c.ou_model()?;
        let handle = SemigroupHandle::exact_ou(ou, c.samples(), seed)?;
        let l = c.config.run.lambda.unwrap_or(resolvent_threshold(&handle) + 1.0);
        let mut rng = c.rng(1);
        let mut worst: f64 = 0.0;
        for i in 0..c.instances().min(10) {
            let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
            let part = if i % 2 == 0 { Part::Real } else { Part::Imaginary };
            let f = TestFunction::cylindrical(h.as_slice().to_vec(), part);
            let r = resolvent_identity_residual(&handle, l, &f, &c.x0, 1e-3, RESOLVENT_TAIL, RESOLVENT_PANELS)?;
            worst = worst.max(r.value);
        }
        let mut rec = CheckRecord::deterministic("resolvent-identity", "(λ - K) R(λ,K) f = f", worst, c.tol("resolvent-identity"), seed)
            .with_note("difference quotient at t = 1e-3");
        if !c.model.is_ou() {
            rec = rec.with_note("difference quotient at t = 1e-3, Ornstein-Uhlenbeck part of the model");
        }
        Ok(rec)
    });
}

fn first_variation_suite(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let dt = ctx.config.run.dt;
    let horizon = ctx.config.run.horizon;
    let bound_formula = "|η^h(t,x)| ≤ M e^{(ω + M‖DF‖)t} |h|";
    ctx.check("first-variation-bound", bound_formula, |c| {
        let mut rng = c.rng(0);
        let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
        let samples = first_variation(&c.model, &c.x0, &h, horizon, dt, c.samples(), seed)?;
        let m = c.model.growth_m();
        let bound = m * ((c.model.growth_omega() + m * c.model.drift().derivative_bound()) * horizon).exp() * h.norm();
        let worst = samples.iter().fold(0.0f64, |a, s| a.max(s.tangent.norm() / bound));
        Ok(CheckRecord::deterministic("first-variation-bound", bound_formula, worst, c.tol("first-variation-bound"), seed)
            .with_note(format!("largest |η|/bound over {} paths", c.samples())))
    });
    let fd_formula = "η^h(t,x) = lim (X(t,x+εh) - X(t,x))/ε";
    ctx.check("first-variation-fd", fd_formula, |c| {
        let mut rng = c.rng(1);
        let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
        let eps = 1e-4;
        let n = c.samples().min(1000);
        let tangents = first_variation(&c.model, &c.x0, &h, horizon, dt, n, seed)?;
        let base = simulate_mild(&c.model, &c.x0, horizon, dt, n, seed)?;
        let moved = simulate_mild(&c.model, &(&c.x0 + &h * eps), horizon, dt, n, seed)?;
        let mut worst: f64 = 0.0;
        for ((t, b), m) in tangents.iter().zip(&base.positions).zip(&moved.positions) {
            worst = worst.max((&t.tangent - (m - b) / eps).norm() / h.norm());
        }
        Ok(CheckRecord::deterministic("first-variation-fd", fd_formula, worst, c.tol("first-variation-fd"), seed)
            .with_note("pathwise, ε = 1e-4, common noise"))
    });
    ctx.check("first-variation-linearity", "η^{αh+βk} = αη^h + βη^k", |c| {
        let mut rng = c.rng(2);
        let (h, k) = (uniform_vec(&mut rng, c.dim(), -1.0, 1.0), uniform_vec(&mut rng, c.dim(), -1.0, 1.0));
        let (alpha, beta) = (unif(&mut rng, -2.0, 2.0), unif(&mut rng, -2.0, 2.0));
        let n = c.samples().min(1000);
        let eh = first_variation(&c.model, &c.x0, &h, horizon, dt, n, seed)?;
        let ek = first_variation(&c.model, &c.x0, &k, horizon, dt, n, seed)?;
        let comb = first_variation(&c.model, &c.x0, &(&h * alpha + &k * beta), horizon, dt, n, seed)?;
        let mut worst: f64 = 0.0;
        for ((a, b), m) in eh.iter().zip(&ek).zip(&comb) {
            let lin = &a.tangent * alpha + &b.tangent * beta;
            worst = worst.max((&m.tangent - &lin).norm() / (1.0 + lin.norm()));
        }
        Ok(CheckRecord::deterministic("first-variation-linearity", "η^{αh+βk} = αη^h + βη^k", worst, c.tol("first-variation-linearity"), seed))
    });
    let grad_formula = "<D P_t f(x), h> = E <Df(X(t,x)), η^h(t,x)>";
    ctx.check("gradient-transition", grad_formula, |c| {
        let mut rng = c.rng(3);
        let h = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
        let freq = uniform_vec(&mut rng, c.dim(), -1.0, 1.0);
        let f = TestFunction::cylindrical(freq.as_slice().to_vec(), Part::Real);
        let handle = SemigroupHandle::monte_carlo(c.model.clone(), dt, c.samples(), seed)?;
        let g = gradient_transition(&handle, &f, horizon, &c.x0, &h)?;
        let fd = coupled_difference(&handle, &f, horizon, &c.x0, &h, 1e-4)?;
        let se = g.stderr.hypot(fd.stderr);
        Ok(CheckRecord::stochastic("gradient-transition", grad_formula, (g.value - fd.value).abs(), se, c.tol("gradient-transition"), seed))
    });
}

fn backward(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let horizon = ctx.config.run.horizon;
    let formula = "u(t,x) = -∫_0^{T-t} P_s φ(x) ds, u_t + Ku = φ, u(T) = 0";
    let phi_for = |c: &SuiteContext<'_>| {
        let h = uniform_vec(&mut c.rng(0), c.dim(), -1.0, 1.0);
        TestFunction::cylindrical(h.as_slice().to_vec(), Part::Real)
    };
    ctx.check("backward-terminal", formula, |c| {
        let handle = c.handle(seed)?;
        let u = backward_solution(&handle, &phi_for(c), horizon, horizon, &c.x0)?;
        Ok(CheckRecord::deterministic("backward-terminal", "u(T,x) = 0", u.value.abs(), c.tol("backward-terminal"), seed))
    });
    ctx.check("backward-constant", formula, |c| {
        let handle = c.handle(seed)?;
        let t = 0.25 * horizon;
        let u = backward_solution(&handle, &TestFunction::constant(1.5), horizon, t, &c.x0)?;
        Ok(CheckRecord::deterministic("backward-constant", "u(t) = -(T-t)c for φ = c", (u.value + (horizon - t) * 1.5).abs(), c.tol("backward-constant"), seed))
    });
    ctx.check("backward-lipschitz", "‖u(t) - u(s)‖_0 ≤ |t - s| ‖φ‖_0", |c| {
        let handle = c.handle(seed)?;
        let phi = phi_for(c);
        let sup = CompiledBank::compile(&c.model, std::slice::from_ref(&phi))?.sup_norm_bound(0);
        let mut rng = c.rng(1);
        let grid = uniform_grid(horizon, 8);
        let mut worst: Option<(f64, f64)> = None;
        for _ in 0..c.instances().min(5) {
            let x = normal_vec(&mut rng, c.dim());
            let us: Vec<_> = grid.iter().map(|t| backward_solution(&handle, &phi, horizon, *t, &x)).collect::<Result<_>>()?;
            for i in 0..us.len() {
                for j in 0..i {
                    let excess = (us[i].value - us[j].value).abs() - (grid[i] - grid[j]) * sup;
                    let se = us[i].stderr + us[j].stderr;
                    if worst.is_none_or(|(e, s)| excess - 3.0 * se > e - 3.0 * s) {
                        worst = Some((excess, se));
                    }
                }
            }
        }
        let (excess, se) = worst.unwrap_or((0.0, 0.0));
        Ok(CheckRecord::stochastic("backward-lipschitz", "‖u(t) - u(s)‖_0 ≤ |t - s| ‖φ‖_0", excess.max(0.0), se, c.tol("backward-lipschitz"), seed))
    });
    ctx.check("backward-pde", "u_t + K_0 u = φ", |c| {
        // Finite differences of u need an exact semigroup: Ornstein-Uhlenbeck part.
        let ou = c.ou_model()?;
        let handle = SemigroupHandle::exact_ou(ou, c.samples(), seed)?;
        let phi = phi_for(c);
        let mut rng = c.rng(2);
        let mut worst: f64 = 0.0;
        for _ in 0..3 {
            let x = normal_vec(&mut rng, c.dim());
            let t = unif(&mut rng, 0.1, 0.9) * horizon;
            worst = worst.max(backward_pde_residual(&handle, &phi, horizon, t, &x, 1e-3, 1e-3)?);
        }
        let mut rec = CheckRecord::deterministic("backward-pde", "u_t + K_0 u = φ", worst, c.tol("backward-pde"), seed);
        if !c.model.is_ou() {
            rec = rec.with_note("Ornstein-Uhlenbeck part of the model");
        }
        Ok(rec)
    });
}

/// Log-log least-squares slope.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn approximation(ctx: &mut SuiteContext<'_>) {
    let seed = ctx.seed;
    let bern = "B_n g(t) = Σ_k C(n,k) t^k (1-t)^{n-k} g(k/n)";
    let grid: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
    ctx.check("bernstein-partition", bern, |c| {
        let mut worst: f64 = 0.0;
        for n in 1..=30 {
            for &t in &grid {
                worst = worst.max((bernstein_approx(|_| 1.0, n, t)? - 1.0).abs());
            }
        }
        Ok(CheckRecord::deterministic("bernstein-partition", "Σ_k C(n,k) t^k (1-t)^{n-k} = 1", worst, c.tol("bernstein-partition"), seed))
    });
    ctx.check("bernstein-affine", bern, |c| {
        let mut worst: f64 = 0.0;
        for n in 1..=30 {
            for &t in &grid {
                worst = worst.max((bernstein_approx(|s| 0.7 - 2.3 * s, n, t)? - (0.7 - 2.3 * t)).abs());
            }
        }
        Ok(CheckRecord::deterministic("bernstein-affine", "B_n(a + bs) = a + bt", worst, c.tol("bernstein-affine"), seed))
    });
    ctx.check("bernstein-square", bern, |c| {
        let r = (bernstein_approx(|s: f64| s * s, 10, 0.5)? - 0.275).abs();
        Ok(CheckRecord::deterministic("bernstein-square", "B_10(s^2)(1/2) = 0.275", r, c.tol("bernstein-square"), seed))
    });
    ctx.check("bernstein-monotone", bern, |c| {
        let mut worst: f64 = 0.0;
        for n in [5, 10, 20] {
            let vals: Vec<f64> = grid.iter().map(|t| bernstein_approx(|s| (3.0 * s).tanh(), n, *t)).collect::<Result<_>>()?;
            for w in vals.windows(2) {
                worst = worst.max(w[0] - w[1]);
            }
        }
        Ok(CheckRecord::deterministic("bernstein-monotone", "g increasing ⇒ B_n g increasing", worst.max(0.0), c.tol("bernstein-monotone"), seed))
    });
    let cesaro = "(1/n3) Σ_i P_{i/(n1 n3)} φ(x) → n1 ∫_0^{1/n1} P_t φ(x) dt";
    ctx.check("cesaro-constant", cesaro, |c| {
        let handle = c.handle(seed)?;
        let v = cesaro_smooth(&handle, &TestFunction::constant(0.75), 3, 5, &c.x0)?;
        Ok(CheckRecord::deterministic("cesaro-constant", cesaro, (v.value - 0.75).abs(), c.tol("cesaro-constant"), seed))
    });
    ctx.check("cesaro-rate", cesaro, |c| {
        let ou = c.ou_model()?;
        let handle = SemigroupHandle::exact_ou(ou, c.samples(), seed)?;
        let h = uniform_vec(&mut c.rng(0), c.dim(), -1.0, 1.0);
        let phi = TestFunction::cylindrical(h.as_slice().to_vec(), Part::Real);
        let n1 = 2;
        let bank = CompiledBank::compile(handle.model(), std::slice::from_ref(&phi))?;
        let rule = Rule::composite(0.0, 1.0 / n1 as f64, 16, PANEL_ORDER);
        let reference = n1 as f64
            * rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(t, w)| handle.transition_apply_compiled(&bank, 0, *t, &c.x0).map(|e| w * e.value))
                .sum::<Result<f64>>()?;
        let ns = [8usize, 16, 32, 64, 128];
        let mut errors = Vec::new();
        let mut series = Series::new("cesaro", &["n3", "value", "reference", "abs_error"]);
        for &n3 in &ns {
            let v = cesaro_smooth(&handle, &phi, n1, n3, &c.x0)?.value;
            errors.push((v - reference).abs());
            series.push(vec![n3 as f64, v, reference, (v - reference).abs()]);
        }
        c.series.push(series);
        if errors.contains(&0.0) {
            return Err(Error::Numerical("Cesàro error vanished; slope undefined".into()));
        }
        let xs: Vec<f64> = ns.iter().map(|n| *n as f64).collect();
        let slope = loglog_slope(&xs, &errors);
        Ok(CheckRecord::deterministic("cesaro-rate", cesaro, (slope + 1.0).abs(), c.tol("cesaro-rate"), seed)
            .with_note(format!("log-log slope {slope:.4} in n3")))
    });
}
