//! The Ornstein–Uhlenbeck semigroup `R_tφ(x) = ∫ φ(e^{tA}x + y) N_{Q_t}(dy)`.
//!
//! On exponentials it acts in closed form,
//! `R_t e^{i⟨·,h⟩}(x) = exp(i⟨e^{tA}x, h⟩ − ½⟨Q_t h, h⟩)`, and the OU-integral
//! class is mapped into itself: `R_tφ_{a,h} = φ_{a+t,h} − φ_{t,h}`.

use nalgebra::{Complex, DVector};
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::linalg::{check_dim, check_finite_vec, GaussianSampler};
use crate::model::GalerkinModel;
use crate::rng::StreamRng;
use crate::scalar::Real;
use crate::sde::{gauss_hermite_expectation, SemigroupHandle, HERMITE_MAX_RANK};
use crate::stats::Estimate;
use crate::testfn::{CompiledBank, Part, TestFunction};

/// Node count the shift-identity check starts refining from.
const SHIFT_START_NODES: usize = 32;
const SHIFT_NODE_LIMIT: usize = 1 << 14;

fn check_args<T: Real>(model: &GalerkinModel<T>, t: T, x: &DVector<T>) -> Result<()> {
    check_dim(x, model.dim(), "x")?;
    check_finite_vec(x, "x")?;
    ensure!(t.is_finite() && t >= T::zero(), Input, "time must be finite and >= 0, got {t}");
    Ok(())
}

/// `exp(i⟨e^{tA}x, h⟩ − ½⟨Q_t h, h⟩)`; the drift of `model` is ignored.
pub fn ou_exact_cyl<T: Real>(model: &GalerkinModel<T>, t: T, h: &DVector<T>, x: &DVector<T>) -> Result<Complex<T>> {
    check_args(model, t, x)?;
    check_dim(h, model.dim(), "h")?;
    check_finite_vec(h, "h")?;
    let phase = (model.semigroup(t) * x).dot(h);
    let damp = (-model.qt(t)?.quadratic_form(h) * T::lit(0.5)).exp();
    Ok(Complex::new(damp * phase.cos(), damp * phase.sin()))
}

/// Monte Carlo estimate of `R_tφ(x)` from `n` draws of `N(e^{tA}x, Q_t)`.
/// Draw `i` uses stream `i` of `seed`.
pub fn ou_apply<T: Real>(
    model: &GalerkinModel<T>,
    t: T,
    phi: &TestFunction<T>,
    x: &DVector<T>,
    n: usize,
    seed: u64,
) -> Result<Estimate<T>> {
    check_args(model, t, x)?;
    ensure!(n >= 2, Input, "need at least two samples, got {n}");
    let bank = CompiledBank::compile(model, std::slice::from_ref(phi))?;
    if t == T::zero() {
        return Ok(Estimate::exact(bank.eval(0, x)));
    }
    if bank.is_constant(0) {
        return Ok(Estimate::exact(bank.constant_term(0)));
    }
    let sampler = GaussianSampler::new(&model.qt(t)?)?;
    let mean = model.semigroup(t) * x;
    let values: Vec<T> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut y = mean.clone();
            sampler.sample_add(&mut StreamRng::new(seed, i as u64), &mut y);
            bank.eval(0, &y)
        })
        .collect();
    Ok(Estimate::from_samples(&values))
}

/// `R_tφ(x)` by tensor Gauss–Hermite over the range of `Q_t` (rank at most 3).
pub fn ou_apply_quadrature<T: Real>(
    model: &GalerkinModel<T>,
    t: T,
    phi: &TestFunction<T>,
    x: &DVector<T>,
    nodes: usize,
) -> Result<T> {
    check_args(model, t, x)?;
    ensure!(nodes >= 1, Input, "need at least one node per axis");
    let bank = CompiledBank::compile(model, std::slice::from_ref(phi))?;
    let sampler = GaussianSampler::new(&model.qt(t)?)?;
    ensure!(
        sampler.rank() <= HERMITE_MAX_RANK,
        Input,
        "tensor quadrature needs rank Q_t <= {HERMITE_MAX_RANK}, got {}",
        sampler.rank()
    );
    let mean = model.semigroup(t) * x;
    Ok(gauss_hermite_expectation(&sampler, &mean, nodes, |y| bank.eval(0, y)))
}

/// `R_tφ(x)` integrated exactly through the Gaussian characteristic function
/// (cylindrical atoms in closed form, OU-integral atoms node by node).
pub fn ou_exact_apply<T: Real>(model: &GalerkinModel<T>, t: T, phi: &TestFunction<T>, x: &DVector<T>) -> Result<T> {
    check_args(model, t, x)?;
    let bank = CompiledBank::compile(model, std::slice::from_ref(phi))?;
    let qt = model.qt(t)?;
    Ok(bank.ou_transition(0, x, &model.semigroup(t), qt.matrix()))
}

/// Complex `φ_{a,h}(x)` and `R_tφ_{a,h}(x)` with `nodes` quadrature nodes.
fn ou_integral_pair<T: Real>(
    model: &GalerkinModel<T>,
    a: T,
    h: &DVector<T>,
    nodes: usize,
    t: T,
    x: &DVector<T>,
) -> Result<(Complex<T>, Complex<T>)> {
    let parts = [Part::Real, Part::Imaginary].map(|p| TestFunction::ou_integral_with_nodes(a, h.as_slice().to_vec(), p, nodes));
    let bank = CompiledBank::compile(model, &parts)?;
    let et = model.semigroup(t);
    let qt = model.qt(t)?;
    let value = Complex::new(bank.eval(0, x), bank.eval(1, x));
    let moved = Complex::new(
        bank.ou_transition(0, x, &et, qt.matrix()),
        bank.ou_transition(1, x, &et, qt.matrix()),
    );
    Ok((value, moved))
}

/// `|R_tφ_{a,h}(x) − (φ_{a+t,h}(x) − φ_{t,h}(x))|` for the complex function,
/// every integral refined by node doubling. The Gaussian integral on the left is
/// done exactly, so only time quadrature error remains.
pub fn ou_shift_identity_check<T: Real>(
    model: &GalerkinModel<T>,
    t: T,
    a: T,
    h: &DVector<T>,
    x: &DVector<T>,
) -> Result<T> {
    check_args(model, t, x)?;
    check_dim(h, model.dim(), "h")?;
    check_finite_vec(h, "h")?;
    ensure!(a.is_finite() && a > T::zero(), Input, "a must be positive, got {a}");
    let sides = |n: usize| -> Result<(Complex<T>, Complex<T>)> {
        let (_, lhs) = ou_integral_pair(model, a, h, n, t, x)?;
        let (long, _) = ou_integral_pair(model, a + t, h, n, T::zero(), x)?;
        let short = if t > T::zero() {
            ou_integral_pair(model, t, h, n, T::zero(), x)?.0
        } else {
            Complex::new(T::zero(), T::zero())
        };
        Ok((lhs, long - short))
    };
    let tol = T::tol(1e-13);
    let mut n = SHIFT_START_NODES;
    let mut coarse = sides(n)?;
    loop {
        let fine = sides(2 * n)?;
        let delta = modulus(fine.0 - coarse.0).max(modulus(fine.1 - coarse.1));
        if delta < tol || 2 * n >= SHIFT_NODE_LIMIT {
            return Ok(modulus(fine.0 - fine.1));
        }
        coarse = fine;
        n *= 2;
    }
}

fn modulus<T: Real>(z: Complex<T>) -> T {
    z.re.hypot(z.im)
}

/// `(P_tφ(x) − φ(x))/t` with the handle's evaluation method.
pub fn generator_quotient<T: Real>(
    handle: &SemigroupHandle<T>,
    phi: &TestFunction<T>,
    x: &DVector<T>,
    t: T,
) -> Result<Estimate<T>> {
    ensure!(t.is_finite() && t > T::zero(), Input, "quotient time must be positive, got {t}");
    let bank = CompiledBank::compile(handle.model(), std::slice::from_ref(phi))?;
    if bank.is_constant(0) {
        return Ok(Estimate::exact(T::zero()));
    }
    let moved = handle.transition_apply_compiled(&bank, 0, t, x)?;
    let here = bank.eval(0, x);
    Ok(Estimate {
        value: (moved.value - here) / t,
        stderr: moved.stderr / t,
        samples: moved.samples,
    })
}
