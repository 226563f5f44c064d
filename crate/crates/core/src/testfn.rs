//! Test functions: cylindrical exponentials `x ↦ e^{i⟨x,h⟩}`, the OU-integral
//! functions
//!
//! ```text
//! φ_{a,h}(x) = ∫_0^a exp(i⟨e^{sA}x, h⟩ − ½⟨Q_s h, h⟩) ds
//! ```
//!
//! constants, and finite real linear combinations of real/imaginary parts.
//!
//! A [`TestFunction`] is a model-independent description. Evaluation goes through
//! [`CompiledBank`], which tabulates `v_j = e^{s_j A*} h` and the damping factors
//! `exp(−½⟨Q_{s_j}h,h⟩)` at the quadrature nodes once per model; afterwards every
//! value, gradient, Hessian and Kolmogorov-operator evaluation is a sum over nodes.

use std::fmt;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::{check_dim, check_finite_vec};
use crate::model::GalerkinModel;
use crate::quadrature::{gauss_legendre, Rule, PANEL_ORDER};
use crate::scalar::Real;

/// Default quadrature nodes on `[0, a]` for OU-integral functions.
pub const DEFAULT_NODES: usize = 128;

/// Node-doubling tolerance for [`TestFunction::refine_nodes`].
pub const REFINE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Real,
    Imaginary,
}

impl Part {
    #[inline]
    pub fn of<T: Real>(self, z: Complex<T>) -> T {
        match self {
            Part::Real => z.re,
            Part::Imaginary => z.im,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylindricalExp<T> {
    pub h: Vec<T>,
    pub part: Part,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuIntegral<T> {
    pub a: T,
    pub h: Vec<T>,
    pub part: Part,
    pub nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction<T> {
    Cylindrical(CylindricalExp<T>),
    OuIntegral(OuIntegral<T>),
    Constant { value: T },
    Combination { coefficients: Vec<T>, terms: Vec<TestFunction<T>> },
}

/// A single complex building block; the value of a term is `coeff · part(atom)`.
#[derive(Clone, Debug, PartialEq)]
enum Atom<T> {
    Cylindrical { h: Vec<T> },
    OuIntegral { a: T, h: Vec<T>, nodes: usize },
}

impl<T: Real> TestFunction<T> {
    pub fn cylindrical(h: Vec<T>, part: Part) -> Self {
        TestFunction::Cylindrical(CylindricalExp { h, part })
    }

    pub fn ou_integral(a: T, h: Vec<T>, part: Part) -> Self {
        Self::ou_integral_with_nodes(a, h, part, DEFAULT_NODES)
    }

    pub fn ou_integral_with_nodes(a: T, h: Vec<T>, part: Part, nodes: usize) -> Self {
        TestFunction::OuIntegral(OuIntegral { a, h, part, nodes })
    }

    pub fn constant(value: T) -> Self {
        TestFunction::Constant { value }
    }

    pub fn combination(terms: Vec<(T, TestFunction<T>)>) -> Self {
        let (coefficients, terms) = terms.into_iter().unzip();
        TestFunction::Combination { coefficients, terms }
    }

    /// Checks finiteness, positivity of `a`, node counts and that every
    /// frequency lives in `R^dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            TestFunction::Cylindrical(c) => check_frequency(&c.h, dim),
            TestFunction::OuIntegral(o) => {
                check_frequency(&o.h, dim)?;
                ensure!(o.a.is_finite() && o.a > T::zero(), Input, "OU-integral upper limit must be positive, got {}", o.a);
                ensure!(o.nodes >= 1, Input, "OU-integral needs at least one quadrature node");
                Ok(())
            }
            TestFunction::Constant { value } => {
                ensure!(value.is_finite(), Input, "constant must be finite");
                Ok(())
            }
            TestFunction::Combination { coefficients, terms } => {
                ensure!(
                    coefficients.len() == terms.len(),
                    Input,
                    "combination has {} coefficients for {} terms",
                    coefficients.len(),
                    terms.len()
                );
                ensure!(coefficients.iter().all(|c| c.is_finite()), Input, "combination coefficients must be finite");
                terms.iter().try_for_each(|t| t.validate(dim))
            }
        }
    }

    /// True when the function is a constant (no atom carries a nonzero coefficient).
    pub fn is_constant(&self) -> bool {
        let mut constant = T::zero();
        let mut terms = Vec::new();
        self.flatten(T::one(), &mut constant, &mut terms);
        terms.iter().all(|(c, _, _)| *c == T::zero())
    }

    /// Upper bound on `‖φ‖_∞` (`1` per exponential, `a` per OU integral).
    pub fn sup_norm_bound(&self) -> T {
        match self {
            TestFunction::Cylindrical(_) => T::one(),
            TestFunction::OuIntegral(o) => o.a,
            TestFunction::Constant { value } => value.abs(),
            TestFunction::Combination { coefficients, terms } => coefficients
                .iter()
                .zip(terms)
                .fold(T::zero(), |acc, (c, t)| acc + c.abs() * t.sup_norm_bound()),
        }
    }

    fn flatten(&self, scale: T, constant: &mut T, out: &mut Vec<(T, Atom<T>, Part)>) {
        match self {
            TestFunction::Cylindrical(c) => out.push((scale, Atom::Cylindrical { h: c.h.clone() }, c.part)),
            TestFunction::OuIntegral(o) => out.push((
                scale,
                Atom::OuIntegral { a: o.a, h: o.h.clone(), nodes: o.nodes },
                o.part,
            )),
            TestFunction::Constant { value } => *constant += scale * *value,
            TestFunction::Combination { coefficients, terms } => {
                for (c, t) in coefficients.iter().zip(terms) {
                    t.flatten(scale * *c, constant, out);
                }
            }
        }
    }

    /// Doubles the node count of every OU-integral atom until the value changes
    /// by less than `tol` at every probe point, starting from `start` nodes.
    pub fn refine_nodes(
        &self,
        model: &GalerkinModel<T>,
        probes: &[DVector<T>],
        start: usize,
        tol: T,
    ) -> Result<Self> {
        match self {
            TestFunction::OuIntegral(o) => {
                let mut nodes = start.max(1);
                loop {
                    // Both parts are probed so that Re/Im siblings refine identically.
                    let both = |n: usize| {
                        [Part::Real, Part::Imaginary]
                            .map(|p| TestFunction::ou_integral_with_nodes(o.a, o.h.clone(), p, n))
                    };
                    let cb = CompiledBank::compile(model, &both(nodes))?;
                    let fb = CompiledBank::compile(model, &both(2 * nodes))?;
                    let worst = probes
                        .iter()
                        .flat_map(|x| (0..2).map(|k| (cb.eval(k, x) - fb.eval(k, x)).abs()))
                        .fold(T::zero(), |a, b| a.max(b));
                    if worst < tol {
                        return Ok(TestFunction::ou_integral_with_nodes(o.a, o.h.clone(), o.part, nodes));
                    }
                    ensure!(nodes < 1 << 16, Numerical, "OU-integral quadrature did not converge (delta {worst})");
                    nodes *= 2;
                }
            }
            TestFunction::Combination { coefficients, terms } => Ok(TestFunction::Combination {
                coefficients: coefficients.clone(),
                terms: terms
                    .iter()
                    .map(|t| t.refine_nodes(model, probes, start, tol))
                    .collect::<Result<_>>()?,
            }),
            other => Ok(other.clone()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

fn check_frequency<T: Real>(h: &[T], dim: usize) -> Result<()> {
    ensure!(h.len() == dim, Contract, "frequency has dimension {} but the model lives in R^{dim}", h.len());
    ensure!(h.iter().all(|v| v.is_finite()), Input, "frequency has non-finite entries");
    Ok(())
}

/// Serializes a bank as a JSON array.
pub fn bank_to_json<T: Real>(bank: &[TestFunction<T>]) -> Result<String> {
    serde_json::to_string_pretty(bank).map_err(|e| Error::Format(e.to_string()))
}

pub fn bank_from_json<T: Real>(text: &str) -> Result<Vec<TestFunction<T>>> {
    serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

impl<T: Real> fmt::Display for TestFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = |p: &Part| if *p == Part::Real { "Re" } else { "Im" };
        match self {
            TestFunction::Cylindrical(c) => write!(f, "{} e^{{i<x,{:?}>}}", part(&c.part), c.h),
            TestFunction::OuIntegral(o) => write!(f, "{} phi[a={}, h={:?}]", part(&o.part), o.a, o.h),
            TestFunction::Constant { value } => write!(f, "{value}"),
            TestFunction::Combination { coefficients, terms } => {
                for (k, (c, t)) in coefficients.iter().zip(terms).enumerate() {
                    if k > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{c}·({t})")?;
                }
                Ok(())
            }
        }
    }
}

/// Node table of one atom against a fixed model.
#[derive(Clone, Debug)]
enum Kernel<T: Real> {
    Cylindrical {
        h: DVector<T>,
        /// `⟨Qh, h⟩`
        qhh: T,
    },
    OuIntegral {
        a: T,
        h: DVector<T>,
        /// `v_j = e^{s_j A*} h`, one column per node.
        v: DMatrix<T>,
        /// Quadrature weight times `exp(−½⟨Q_{s_j}h,h⟩)`.
        w: Vec<T>,
        /// `e^{aA*} h` and `exp(−½⟨Q_a h,h⟩)`.
        v_end: DVector<T>,
        damp_end: T,
    },
}

#[inline]
fn cis<T: Real>(theta: T) -> Complex<T> {
    let (s, c) = theta.sin_cos();
    Complex::new(c, s)
}

#[inline]
fn dot_col<T: Real>(m: &DMatrix<T>, col: usize, x: &[T]) -> T {
    let c = m.column(col);
    let mut acc = T::zero();
    for (a, b) in c.iter().zip(x) {
        acc += *a * *b;
    }
    acc
}

impl<T: Real> Kernel<T> {
    fn compile(model: &GalerkinModel<T>, atom: &Atom<T>) -> Result<Self> {
        match atom {
            Atom::Cylindrical { h } => {
                let h = DVector::from_column_slice(h);
                Ok(Kernel::Cylindrical { qhh: model.q().quadratic_form(&h), h })
            }
            Atom::OuIntegral { a, h, nodes } => {
                let h = DVector::from_column_slice(h);
                let rule = Rule::with_nodes(T::zero(), *a, *nodes);
                let mut points = rule.nodes.clone();
                points.push(*a);
                let (vs, qs) = cumulative_profile(model, &h, &points);
                let n = rule.len();
                let d = model.dim();
                let mut v = DMatrix::zeros(d, n);
                let mut w = Vec::with_capacity(n);
                for j in 0..n {
                    v.set_column(j, &vs[j]);
                    w.push(rule.weights[j] * (-qs[j] * T::lit(0.5)).exp());
                }
                Ok(Kernel::OuIntegral {
                    a: *a,
                    h,
                    v,
                    w,
                    v_end: vs[n].clone(),
                    damp_end: (-qs[n] * T::lit(0.5)).exp(),
                })
            }
        }
    }

    fn value(&self, x: &[T]) -> Complex<T> {
        match self {
            Kernel::Cylindrical { h, .. } => cis(dot_slice(h.as_slice(), x)),
            Kernel::OuIntegral { v, w, .. } => {
                let mut acc = Complex::new(T::zero(), T::zero());
                for (j, wj) in w.iter().enumerate() {
                    acc += cis(dot_col(v, j, x)) * *wj;
                }
                acc
            }
        }
    }

    /// `(φ(x), ⟨Dφ(x), f⟩)` in one pass.
    fn value_and_directional(&self, x: &[T], f: &[T]) -> (Complex<T>, Complex<T>) {
        let i = Complex::new(T::zero(), T::one());
        match self {
            Kernel::Cylindrical { h, .. } => {
                let z = cis(dot_slice(h.as_slice(), x));
                (z, i * z * dot_slice(h.as_slice(), f))
            }
            Kernel::OuIntegral { v, w, .. } => {
                let mut val = Complex::new(T::zero(), T::zero());
                let mut dir = Complex::new(T::zero(), T::zero());
                for (j, wj) in w.iter().enumerate() {
                    let z = cis(dot_col(v, j, x)) * *wj;
                    val += z;
                    dir += z * dot_col(v, j, f);
                }
                (val, i * dir)
            }
        }
    }

    /// Complex gradient `Σ_j w_j i v_j e^{i⟨x,v_j⟩}`.
    fn gradient(&self, x: &[T]) -> (DVector<T>, DVector<T>) {
        match self {
            Kernel::Cylindrical { h, .. } => {
                let (s, c) = dot_slice(h.as_slice(), x).sin_cos();
                (h * (-s), h * c)
            }
            Kernel::OuIntegral { v, w, .. } => {
                let d = v.nrows();
                let mut re = DVector::zeros(d);
                let mut im = DVector::zeros(d);
                for (j, wj) in w.iter().enumerate() {
                    let (s, c) = dot_col(v, j, x).sin_cos();
                    re.axpy(-s * *wj, &v.column(j), T::one());
                    im.axpy(c * *wj, &v.column(j), T::one());
                }
                (re, im)
            }
        }
    }

    /// Complex Hessian `−Σ_j w_j v_j v_jᵀ e^{i⟨x,v_j⟩}`.
    fn hessian(&self, x: &[T]) -> (DMatrix<T>, DMatrix<T>) {
        match self {
            Kernel::Cylindrical { h, .. } => {
                let (s, c) = dot_slice(h.as_slice(), x).sin_cos();
                let hh = h * h.transpose();
                (&hh * (-c), &hh * (-s))
            }
            Kernel::OuIntegral { v, w, .. } => {
                let d = v.nrows();
                let mut re = DMatrix::zeros(d, d);
                let mut im = DMatrix::zeros(d, d);
                for (j, wj) in w.iter().enumerate() {
                    let (s, c) = dot_col(v, j, x).sin_cos();
                    let vv = v.column(j) * v.column(j).transpose();
                    re -= &vv * (c * *wj);
                    im -= &vv * (s * *wj);
                }
                (re, im)
            }
        }
    }

    /// Closed-form Ornstein–Uhlenbeck generator on the atom:
    /// `[−½⟨Qh,h⟩ + i⟨h, Ax⟩] e^{i⟨x,h⟩}` for exponentials and
    /// `exp(i⟨x, e^{aA*}h⟩ − ½⟨Q_a h,h⟩) − e^{i⟨x,h⟩}` for OU integrals.
    fn ou_generator(&self, model: &GalerkinModel<T>, x: &[T]) -> Complex<T> {
        match self {
            Kernel::Cylindrical { h, qhh } => {
                let xv = DVector::from_column_slice(x);
                let ax = model.a().apply(&xv);
                let drift = Complex::new(-*qhh * T::lit(0.5), h.dot(&ax));
                drift * cis(h.dot(&xv))
            }
            Kernel::OuIntegral { h, v_end, damp_end, .. } => {
                cis(dot_slice(v_end.as_slice(), x)) * *damp_end - cis(dot_slice(h.as_slice(), x))
            }
        }
    }

    /// `R_t` applied to the atom at `x`, given `e^{tA}x` and `Q_t`:
    /// `exp(i⟨e^{tA}x, v⟩ − ½⟨Q_t v, v⟩)` integrated against the node weights.
    fn ou_transition(&self, etx: &DVector<T>, qt: &DMatrix<T>) -> Complex<T> {
        match self {
            Kernel::Cylindrical { h, .. } => {
                let damp = (-(qt * h).dot(h) * T::lit(0.5)).exp();
                cis(h.dot(etx)) * damp
            }
            Kernel::OuIntegral { v, w, .. } => {
                let mut acc = Complex::new(T::zero(), T::zero());
                for (j, wj) in w.iter().enumerate() {
                    let vj = v.column(j);
                    let damp = (-(qt * vj).dot(&vj) * T::lit(0.5)).exp();
                    acc += cis(vj.dot(etx)) * (*wj * damp);
                }
                acc
            }
        }
    }

    fn sup_bound(&self) -> T {
        match self {
            Kernel::Cylindrical { .. } => T::one(),
            Kernel::OuIntegral { a, .. } => *a,
        }
    }
}

#[inline]
fn dot_slice<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `e^{sA*}h` and `⟨Q_s h, h⟩` at increasing times `points`, integrating
/// `⟨Q e^{rA*}h, e^{rA*}h⟩` gap by gap with a Gauss–Legendre panel.
fn cumulative_profile<T: Real>(
    model: &GalerkinModel<T>,
    h: &DVector<T>,
    points: &[T],
) -> (Vec<DVector<T>>, Vec<T>) {
    let at = model.a().adjoint();
    let (x, w) = gauss_legendre(PANEL_ORDER);
    let q = model.q();
    let mut vs = Vec::with_capacity(points.len());
    let mut qs = Vec::with_capacity(points.len());
    let mut prev = T::zero();
    let mut cumulative = T::zero();
    for &p in points {
        let half = (p - prev) * T::lit(0.5);
        if half > T::zero() {
            for (xi, wi) in x.iter().zip(&w) {
                let r = prev + half * (T::one() + T::lit(*xi));
                let vr = at.exp(r) * h;
                cumulative += half * T::lit(*wi) * q.quadratic_form(&vr);
            }
        }
        vs.push(at.exp(p) * h);
        qs.push(cumulative);
        prev = p;
    }
    (vs, qs)
}

/// One compiled function: `constant + Σ (c_re Re z_k + c_im Im z_k)` over atoms `z_k`.
#[derive(Clone, Debug)]
struct Combination<T> {
    constant: T,
    coeffs: Vec<(usize, T, T)>,
}

impl<T: Real> Combination<T> {
    #[inline]
    fn project(&self, z: &[Complex<T>]) -> T {
        self.coeffs
            .iter()
            .fold(self.constant, |acc, &(k, cr, ci)| acc + cr * z[k].re + ci * z[k].im)
    }

    #[inline]
    fn project_linear(&self, z: &[Complex<T>]) -> T {
        self.coeffs
            .iter()
            .fold(T::zero(), |acc, &(k, cr, ci)| acc + cr * z[k].re + ci * z[k].im)
    }
}

/// A set of test functions compiled against a model, with atoms shared
/// between functions (the real and imaginary part of one atom cost one sum).
#[derive(Clone, Debug)]
pub struct CompiledBank<T: Real> {
    model: GalerkinModel<T>,
    kernels: Vec<Kernel<T>>,
    functions: Vec<Combination<T>>,
}

impl<T: Real> CompiledBank<T> {
    pub fn compile(model: &GalerkinModel<T>, functions: &[TestFunction<T>]) -> Result<Self> {
        let mut atoms: Vec<Atom<T>> = Vec::new();
        let mut compiled = Vec::with_capacity(functions.len());
        for f in functions {
            f.validate(model.dim())?;
            let mut constant = T::zero();
            let mut terms = Vec::new();
            f.flatten(T::one(), &mut constant, &mut terms);
            let mut coeffs: Vec<(usize, T, T)> = Vec::new();
            for (c, atom, part) in terms {
                let k = match atoms.iter().position(|a| *a == atom) {
                    Some(k) => k,
                    None => {
                        atoms.push(atom);
                        atoms.len() - 1
                    }
                };
                let slot = match coeffs.iter().position(|e| e.0 == k) {
                    Some(s) => s,
                    None => {
                        coeffs.push((k, T::zero(), T::zero()));
                        coeffs.len() - 1
                    }
                };
                match part {
                    Part::Real => coeffs[slot].1 += c,
                    Part::Imaginary => coeffs[slot].2 += c,
                }
            }
            compiled.push(Combination { constant, coeffs });
        }
        let kernels = atoms
            .iter()
            .map(|a| Kernel::compile(model, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model: model.clone(), kernels, functions: compiled })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn model(&self) -> &GalerkinModel<T> {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    fn atom_values(&self, x: &[T]) -> Vec<Complex<T>> {
        self.kernels.iter().map(|k| k.value(x)).collect()
    }

    pub fn eval(&self, index: usize, x: &DVector<T>) -> T {
        let f = &self.functions[index];
        let z: Vec<Complex<T>> = self
            .kernels
            .iter()
            .enumerate()
            .map(|(k, ker)| {
                if f.coeffs.iter().any(|c| c.0 == k) {
                    ker.value(x.as_slice())
                } else {
                    Complex::new(T::zero(), T::zero())
                }
            })
            .collect();
        f.project(&z)
    }

    /// Values of every function at `x`.
    pub fn eval_all(&self, x: &DVector<T>, out: &mut [T]) {
        let z = self.atom_values(x.as_slice());
        for (o, f) in out.iter_mut().zip(&self.functions) {
            *o = f.project(&z);
        }
    }

    pub fn gradient(&self, index: usize, x: &DVector<T>) -> DVector<T> {
        let mut g = DVector::zeros(self.dim());
        for &(k, cr, ci) in &self.functions[index].coeffs {
            let (re, im) = self.kernels[k].gradient(x.as_slice());
            g += re * cr + im * ci;
        }
        g
    }

    pub fn hessian(&self, index: usize, x: &DVector<T>) -> DMatrix<T> {
        let d = self.dim();
        let mut hm = DMatrix::zeros(d, d);
        for &(k, cr, ci) in &self.functions[index].coeffs {
            let (re, im) = self.kernels[k].hessian(x.as_slice());
            hm += re * cr + im * ci;
        }
        hm
    }

    /// `K₀φ(x) = ½Tr[Q D²φ(x)] + ⟨Ax, Dφ(x)⟩ + ⟨Dφ(x), F(x)⟩`, assembled from the
    /// Hessian and gradient.
    pub fn kolmogorov(&self, index: usize, x: &DVector<T>) -> T {
        let hess = self.hessian(index, x);
        let grad = self.gradient(index, x);
        let trace = (self.model.q().matrix() * hess).trace();
        let ax = self.model.a().apply(x);
        let fx = self.model.drift_at(x);
        trace * T::lit(0.5) + ax.dot(&grad) + grad.dot(&fx)
    }

    /// `Lφ(x)` from the closed forms on exponentials and OU integrals.
    pub fn ou_generator(&self, index: usize, x: &DVector<T>) -> T {
        let f = &self.functions[index];
        let mut z = vec![Complex::new(T::zero(), T::zero()); self.kernels.len()];
        for &(k, _, _) in &f.coeffs {
            z[k] = self.kernels[k].ou_generator(&self.model, x.as_slice());
        }
        f.project_linear(&z)
    }

    /// `K₀φ = Lφ + ⟨Dφ, F⟩` for every function, with `L` in closed form. This is
    /// the bulk path used on particle clouds.
    pub fn kolmogorov_all(&self, x: &DVector<T>, out: &mut [T]) {
        let xs = x.as_slice();
        let lz: Vec<Complex<T>> = self.kernels.iter().map(|k| k.ou_generator(&self.model, xs)).collect();
        if self.model.is_ou() {
            for (o, f) in out.iter_mut().zip(&self.functions) {
                *o = f.project_linear(&lz);
            }
            return;
        }
        let fx = self.model.drift_at(x);
        let dz: Vec<Complex<T>> = self
            .kernels
            .iter()
            .map(|k| k.value_and_directional(xs, fx.as_slice()).1)
            .collect();
        for (o, f) in out.iter_mut().zip(&self.functions) {
            *o = f.project_linear(&lz) + f.project_linear(&dz);
        }
    }

    /// Values and `K₀` values at once (shares the atom sums when `F ≠ 0`).
    pub fn eval_and_kolmogorov_all(&self, x: &DVector<T>, values: &mut [T], generator: &mut [T]) {
        let xs = x.as_slice();
        let lz: Vec<Complex<T>> = self.kernels.iter().map(|k| k.ou_generator(&self.model, xs)).collect();
        if self.model.is_ou() {
            let z = self.atom_values(xs);
            for ((v, g), f) in values.iter_mut().zip(generator.iter_mut()).zip(&self.functions) {
                *v = f.project(&z);
                *g = f.project_linear(&lz);
            }
            return;
        }
        let fx = self.model.drift_at(x);
        let (z, dz): (Vec<_>, Vec<_>) = self
            .kernels
            .iter()
            .map(|k| k.value_and_directional(xs, fx.as_slice()))
            .unzip();
        for ((v, g), f) in values.iter_mut().zip(generator.iter_mut()).zip(&self.functions) {
            *v = f.project(&z);
            *g = f.project_linear(&lz) + f.project_linear(&dz);
        }
    }

    /// `R_tφ(x)` for the Ornstein–Uhlenbeck part of the model, given `e^{tA}` and
    /// `Q_t`: each atom is integrated against `N(e^{tA}x, Q_t)` through the
    /// Gaussian characteristic function.
    pub fn ou_transition(&self, index: usize, x: &DVector<T>, et: &DMatrix<T>, qt: &DMatrix<T>) -> T {
        let f = &self.functions[index];
        let etx = et * x;
        let mut z = vec![Complex::new(T::zero(), T::zero()); self.kernels.len()];
        for &(k, _, _) in &f.coeffs {
            z[k] = self.kernels[k].ou_transition(&etx, qt);
        }
        f.project(&z)
    }

    pub fn constant_term(&self, index: usize) -> T {
        self.functions[index].constant
    }

    pub fn is_constant(&self, index: usize) -> bool {
        self.functions[index].coeffs.iter().all(|&(_, cr, ci)| cr == T::zero() && ci == T::zero())
    }

    /// Upper bound on `‖φ‖_∞`.
    pub fn sup_norm_bound(&self, index: usize) -> T {
        let f = &self.functions[index];
        f.coeffs.iter().fold(f.constant.abs(), |acc, &(k, cr, ci)| {
            acc + (cr * cr + ci * ci).sqrt() * self.kernels[k].sup_bound()
        })
    }
}

fn compile_one<T: Real>(phi: &TestFunction<T>, model: &GalerkinModel<T>, x: &DVector<T>) -> Result<CompiledBank<T>> {
    check_dim(x, model.dim(), "x")?;
    check_finite_vec(x, "x")?;
    CompiledBank::compile(model, std::slice::from_ref(phi))
}

/// `φ(x)`.
pub fn eval<T: Real>(phi: &TestFunction<T>, model: &GalerkinModel<T>, x: &DVector<T>) -> Result<T> {
    Ok(compile_one(phi, model, x)?.eval(0, x))
}

/// `Dφ(x)`.
pub fn gradient<T: Real>(phi: &TestFunction<T>, model: &GalerkinModel<T>, x: &DVector<T>) -> Result<DVector<T>> {
    Ok(compile_one(phi, model, x)?.gradient(0, x))
}

/// `D²φ(x)`.
pub fn hessian<T: Real>(phi: &TestFunction<T>, model: &GalerkinModel<T>, x: &DVector<T>) -> Result<DMatrix<T>> {
    Ok(compile_one(phi, model, x)?.hessian(0, x))
}

/// `K₀φ(x)` assembled from Hessian, gradient and the model data.
pub fn kolmogorov_apply<T: Real>(phi: &TestFunction<T>, model: &GalerkinModel<T>, x: &DVector<T>) -> Result<T> {
    let fx = model.drift_at(x);
    ensure!(fx.iter().all(|v| v.is_finite()), Input, "F(x) is not finite");
    Ok(compile_one(phi, model, x)?.kolmogorov(0, x))
}
