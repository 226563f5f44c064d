//! Time integrals of the semigroup: resolvent, backward Kolmogorov solution and
//! Cesàro averages, plus Bernstein polynomials.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, Result};
use crate::linalg::check_dim;
use crate::quadrature::{Rule, PANEL_ORDER};
use crate::scalar::Real;
use crate::sde::SemigroupHandle;
use crate::stats::Estimate;
use crate::testfn::{CompiledBank, TestFunction};

/// Gauss–Legendre panels per unit time for the backward solution.
pub const BACKWARD_PANELS_PER_UNIT: usize = 4;

/// Value of a truncated Laplace transform in time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolventValue<T> {
    pub value: T,
    /// Sum of the per-node standard errors (zero for exact handles).
    pub stderr: T,
    /// `e^{−λT}‖f‖_∞/λ`, the neglected tail.
    pub tail_bound: T,
    pub horizon: T,
}

fn compile_checked<T: Real>(handle: &SemigroupHandle<T>, f: &TestFunction<T>, x: &DVector<T>) -> Result<CompiledBank<T>> {
    check_dim(x, handle.model().dim(), "x")?;
    CompiledBank::compile(handle.model(), std::slice::from_ref(f))
}

/// Smallest admissible `λ`: `max(0, ω + M L_F)`.
pub fn resolvent_threshold<T: Real>(handle: &SemigroupHandle<T>) -> T {
    let m = handle.model();
    (m.growth_omega() + m.growth_m() * m.lipschitz()).max(T::zero())
}

/// Truncation horizon with `e^{−λT} sup/λ ≤ tol`.
fn horizon_for<T: Real>(lambda: T, sup: T, tol: T) -> T {
    if sup == T::zero() {
        return T::zero();
    }
    ((sup / (lambda * tol)).ln() / lambda).max(T::zero())
}

/// `∫_0^T e^{−λs} P_{s+shift} f(x) ds` by composite Gauss–Legendre.
fn laplace<T: Real>(
    handle: &SemigroupHandle<T>,
    bank: &CompiledBank<T>,
    lambda: T,
    x: &DVector<T>,
    shift: T,
    horizon: T,
    panels: usize,
) -> Result<(T, T)> {
    if horizon == T::zero() {
        return Ok((T::zero(), T::zero()));
    }
    let rule = Rule::composite(T::zero(), horizon, panels.max(1), PANEL_ORDER);
    let shifted: Vec<T> = rule.nodes.iter().map(|s| *s + shift).collect();
    let evals = handle.transition_apply_many(bank, 0, &shifted, x)?;
    let (mut value, mut stderr) = (T::zero(), T::zero());
    for ((s, w), e) in rule.nodes.iter().zip(&rule.weights).zip(&evals) {
        let k = *w * (-lambda * *s).exp();
        value += k * e.value;
        stderr += k * e.stderr;
    }
    Ok((value, stderr))
}

/// `R(λ,K)f(x) = ∫_0^∞ e^{−λt} P_t f(x) dt`, truncated where the tail bound drops
/// below `tol`; `panels` Gauss–Legendre panels cover `[0, T]`.
pub fn resolvent_apply<T: Real>(
    handle: &SemigroupHandle<T>,
    lambda: T,
    f: &TestFunction<T>,
    x: &DVector<T>,
    tol: T,
    panels: usize,
) -> Result<ResolventValue<T>> {
    let threshold = resolvent_threshold(handle);
    ensure!(
        lambda.is_finite() && lambda > threshold,
        Input,
        "resolvent needs lambda > max(0, omega + M L_F) = {threshold}, got {lambda}"
    );
    ensure!(tol > T::zero(), Input, "tail tolerance must be positive");
    let bank = compile_checked(handle, f, x)?;
    let sup = bank.sup_norm_bound(0);
    let horizon = horizon_for(lambda, sup, tol);
    let tail_bound = (-lambda * horizon).exp() * sup / lambda;
    let (value, stderr) = laplace(handle, &bank, lambda, x, T::zero(), horizon, panels)?;
    Ok(ResolventValue { value, stderr, tail_bound, horizon })
}

/// `|λg(x) − (P_t g(x) − g(x))/t − f(x)|` with `g = R(λ,K)f`: the resolvent
/// equation `(λ − K)R(λ,K)f = f` tested through a difference quotient.
pub fn resolvent_identity_residual<T: Real>(
    handle: &SemigroupHandle<T>,
    lambda: T,
    f: &TestFunction<T>,
    x: &DVector<T>,
    t_small: T,
    tol: T,
    panels: usize,
) -> Result<Estimate<T>> {
    ensure!(t_small > T::zero(), Input, "quotient time must be positive");
    let r = resolvent_apply(handle, lambda, f, x, tol, panels)?;
    let bank = compile_checked(handle, f, x)?;
    let (moved, moved_se) = laplace(handle, &bank, lambda, x, t_small, r.horizon, panels)?;
    let quotient = (moved - r.value) / t_small;
    let value = (lambda * r.value - quotient - bank.eval(0, x)).abs();
    let stderr = lambda * r.stderr + (moved_se + r.stderr) / t_small;
    Ok(Estimate { value, stderr, samples: 0 })
}

/// `u(t,x) = −∫_0^{T−t} P_sφ(x) ds`, the solution of `u_t + Ku = φ`, `u(T) = 0`.
pub fn backward_solution<T: Real>(
    handle: &SemigroupHandle<T>,
    phi: &TestFunction<T>,
    horizon: T,
    t: T,
    x: &DVector<T>,
) -> Result<Estimate<T>> {
    ensure!(horizon.is_finite() && t.is_finite(), Input, "times must be finite");
    ensure!(t >= T::zero() && t <= horizon, Input, "need 0 <= t <= T, got t = {t}, T = {horizon}");
    let bank = compile_checked(handle, phi, x)?;
    backward_compiled(handle, &bank, horizon, t, x)
}

fn backward_compiled<T: Real>(
    handle: &SemigroupHandle<T>,
    bank: &CompiledBank<T>,
    horizon: T,
    t: T,
    x: &DVector<T>,
) -> Result<Estimate<T>> {
    let span = horizon - t;
    if span == T::zero() {
        return Ok(Estimate::exact(T::zero()));
    }
    if bank.is_constant(0) {
        return Ok(Estimate::exact(-span * bank.constant_term(0)));
    }
    let panels = ((span.as_f64() * BACKWARD_PANELS_PER_UNIT as f64).ceil() as usize).max(1);
    let rule = Rule::composite(T::zero(), span, panels, PANEL_ORDER);
    let evals = handle.transition_apply_many(bank, 0, &rule.nodes, x)?;
    let (mut value, mut stderr) = (T::zero(), T::zero());
    for (w, e) in rule.weights.iter().zip(&evals) {
        value -= *w * e.value;
        stderr += *w * e.stderr;
    }
    Ok(Estimate { value, stderr, samples: 0 })
}

/// `|u_t + K₀u − φ|` at `(t, x)` with `u_t` by a central difference of step `dt`
/// and `K₀u = ½Tr[QD²u] + ⟨Ax + F(x), Du⟩` by central differences of step `dx`.
pub fn backward_pde_residual<T: Real>(
    handle: &SemigroupHandle<T>,
    phi: &TestFunction<T>,
    horizon: T,
    t: T,
    x: &DVector<T>,
    dt: T,
    dx: T,
) -> Result<T> {
    ensure!(dt > T::zero() && dx > T::zero(), Input, "difference steps must be positive");
    ensure!(t - dt >= T::zero() && t + dt <= horizon, Input, "t ± dt must lie in [0, T]");
    let bank = compile_checked(handle, phi, x)?;
    let u = |s: T, y: &DVector<T>| backward_compiled(handle, &bank, horizon, s, y).map(|e| e.value);
    let ut = (u(t + dt, x)? - u(t - dt, x)?) / (dt + dt);

    let model = handle.model();
    let d = model.dim();
    let centre = u(t, x)?;
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let two = T::lit(2.0);
    let unit = |i: usize| DVector::from_fn(d, |r, _| if r == i { dx } else { T::zero() });
    for i in 0..d {
        let ei = unit(i);
        let (p, m) = (u(t, &(x + &ei))?, u(t, &(x - &ei))?);
        grad[i] = (p - m) / (two * dx);
        hess[(i, i)] = (p - two * centre + m) / (dx * dx);
        for j in 0..i {
            let ej = unit(j);
            let pp = u(t, &(x + &ei + &ej))?;
            let pm = u(t, &(x + &ei - &ej))?;
            let mp = u(t, &(x - &ei + &ej))?;
            let mm = u(t, &(x - &ei - &ej))?;
            let v = (pp - pm - mp + mm) / (T::lit(4.0) * dx * dx);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let trace = (model.q().matrix() * &hess).trace();
    let drift = model.a().apply(x) + model.drift_at(x);
    let k0u = trace * T::lit(0.5) + drift.dot(&grad);
    Ok((ut + k0u - bank.eval(0, x)).abs())
}

/// `Σ_k C(n,k) t^k (1−t)^{n−k} g(k/n)`, weights formed in log space.
pub fn bernstein_approx<T: Real>(g: impl Fn(T) -> T, n: usize, t: T) -> Result<T> {
    ensure!(n >= 1, Input, "Bernstein degree must be >= 1");
    ensure!(t >= T::zero() && t <= T::one(), Input, "t must lie in [0, 1], got {t}");
    let nn = T::from_usize_lossy(n);
    if t == T::zero() {
        return Ok(g(T::zero()));
    }
    if t == T::one() {
        return Ok(g(T::one()));
    }
    let (lt, ls) = (t.ln(), (T::one() - t).ln());
    let mut log_binom = T::zero();
    let mut acc = T::zero();
    for k in 0..=n {
        if k > 0 {
            log_binom += (T::from_usize_lossy(n - k + 1) / T::from_usize_lossy(k)).ln();
        }
        let kk = T::from_usize_lossy(k);
        let w = (log_binom + kk * lt + (nn - kk) * ls).exp();
        acc += w * g(kk / nn);
    }
    Ok(acc)
}

/// `(1/n₃) Σ_{i=1}^{n₃} P_{i/(n₁n₃)}φ(x)`, a Riemann sum for `n₁∫_0^{1/n₁} P_tφ(x) dt`.
pub fn cesaro_smooth<T: Real>(
    handle: &SemigroupHandle<T>,
    phi: &TestFunction<T>,
    n1: usize,
    n3: usize,
    x: &DVector<T>,
) -> Result<Estimate<T>> {
    ensure!(n1 >= 1 && n3 >= 1, Input, "n1 and n3 must be >= 1");
    let bank = compile_checked(handle, phi, x)?;
    if bank.is_constant(0) {
        return Ok(Estimate::exact(bank.constant_term(0)));
    }
    let step = T::one() / T::from_usize_lossy(n1 * n3);
    let times: Vec<T> = (1..=n3).map(|i| step * T::from_usize_lossy(i)).collect();
    let (mut value, mut stderr) = (T::zero(), T::zero());
    for e in handle.transition_apply_many(&bank, 0, &times, x)? {
        value += e.value;
        stderr += e.stderr;
    }
    let k = T::from_usize_lossy(n3);
    Ok(Estimate { value: value / k, stderr: stderr / k, samples: 0 })
}
