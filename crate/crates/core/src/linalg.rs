//! Dense operator algebra on the truncated space `H = R^d`.
//!
//! Matrix exponentials, the integrated covariance `Q_t = ∫_0^t e^{sA} Q e^{sA*} ds`
//! and centred Gaussian sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure, Error, Result};
use crate::quadrature::{gauss_legendre, PANEL_ORDER};
use crate::rng::StreamRng;
use crate::scalar::Real;

/// Default panel count for [`covariance_qt`].
pub const DEFAULT_QT_STEPS: usize = 64;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

fn all_finite<'a, T: Real>(mut it: impl Iterator<Item = &'a T>) -> bool {
    it.all(|v| v.is_finite())
}

pub(crate) fn check_finite_vec<T: Real>(x: &DVector<T>, what: &str) -> Result<()> {
    ensure!(all_finite(x.iter()), Input, "{what} has non-finite entries");
    Ok(())
}

pub(crate) fn check_dim<T: Real>(x: &DVector<T>, dim: usize, what: &str) -> Result<()> {
    ensure!(
        x.len() == dim,
        Contract,
        "{what} has dimension {} but the operator acts on R^{dim}",
        x.len()
    );
    Ok(())
}

/// Dense square operator on `R^d`, optionally flagged self-adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOperator<T: Real> {
    matrix: DMatrix<T>,
    self_adjoint: bool,
}

impl<T: Real> LinearOperator<T> {
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        ensure!(matrix.nrows() >= 1, Contract, "operator must have dimension >= 1");
        ensure!(
            matrix.is_square(),
            Contract,
            "operator must be square, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        );
        ensure!(all_finite(matrix.iter()), Input, "operator has non-finite entries");
        Ok(Self { matrix, self_adjoint: false })
    }

    /// Builds an operator flagged self-adjoint; rejects matrices that are not.
    pub fn self_adjoint(matrix: DMatrix<T>) -> Result<Self> {
        let mut op = Self::new(matrix)?;
        let asym = max_abs(&(&op.matrix - op.matrix.transpose()));
        let tol = T::tol(SYMMETRY_TOL) * (T::one() + max_abs(&op.matrix));
        ensure!(asym <= tol, Input, "operator flagged self-adjoint has asymmetry {asym}");
        op.self_adjoint = true;
        Ok(op)
    }

    /// Row-major entries.
    pub fn from_row_slice(dim: usize, entries: &[T]) -> Result<Self> {
        ensure!(
            entries.len() == dim * dim,
            Contract,
            "expected {} entries for a {dim}x{dim} operator, got {}",
            dim * dim,
            entries.len()
        );
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: DMatrix::identity(dim, dim), self_adjoint: true }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { matrix: DMatrix::zeros(dim, dim), self_adjoint: true }
    }

    pub fn scaled_identity(dim: usize, s: T) -> Self {
        Self { matrix: DMatrix::identity(dim, dim) * s, self_adjoint: true }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn is_self_adjoint(&self) -> bool {
        self.self_adjoint
    }

    pub fn adjoint(&self) -> Self {
        Self { matrix: self.matrix.transpose(), self_adjoint: self.self_adjoint }
    }

    pub fn apply(&self, x: &DVector<T>) -> DVector<T> {
        &self.matrix * x
    }

    /// `e^{tA}` as a dense matrix.
    pub fn exp(&self, t: T) -> DMatrix<T> {
        expm(&(&self.matrix * t))
    }

    /// Spectral norm `‖A‖₂`.
    pub fn operator_norm(&self) -> T {
        operator_norm(&self.matrix)
    }

    /// Logarithmic norm `λ_max((A + A*)/2)`, so that `‖e^{tA}‖ ≤ e^{t·lognorm}`.
    pub fn log_norm(&self) -> T {
        let sym = (&self.matrix + self.matrix.transpose()) * T::lit(0.5);
        SymmetricEigen::new(sym).eigenvalues.max()
    }
}

pub fn operator_norm<T: Real>(m: &DMatrix<T>) -> T {
    m.clone().svd(false, false).singular_values.max()
}

/// Matrix exponential by scaling and squaring with a Padé approximant whose
/// degree (3, 5, 7, 9 or 13) is chosen from the 1-norm.
pub fn expm<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    const THETA: [(usize, f64); 5] = [
        (3, 1.495585217958292e-2),
        (5, 2.53939833006323e-1),
        (7, 9.504178996162932e-1),
        (9, 2.097847961257068e0),
        (13, 5.371920351148152e0),
    ];
    let n = m.nrows();
    let norm1 = (0..n)
        .map(|j| m.column(j).iter().fold(T::zero(), |acc, v| acc + v.abs()))
        .fold(T::zero(), |a, b| a.max(b))
        .as_f64();
    if norm1 == 0.0 {
        return DMatrix::identity(n, n);
    }
    for &(degree, theta) in &THETA[..4] {
        if norm1 <= theta {
            return pade(m, degree);
        }
    }
    let s = (norm1 / THETA[4].1).log2().ceil().max(0.0) as i32;
    let scaled = m * T::lit(2f64.powi(-s));
    let mut r = pade(&scaled, 13);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

fn pade<T: Real>(a: &DMatrix<T>, degree: usize) -> DMatrix<T> {
    let b: &[f64] = match degree {
        3 => &[120.0, 60.0, 12.0, 1.0],
        5 => &[30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0],
        7 => &[17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0],
        9 => &[
            17643225600.0,
            8821612800.0,
            2075673600.0,
            302702400.0,
            30270240.0,
            2162160.0,
            110880.0,
            3960.0,
            90.0,
            1.0,
        ],
        13 => &[
            64764752532480000.0,
            32382376266240000.0,
            7771770303897600.0,
            1187353796428800.0,
            129060195264000.0,
            10559470521600.0,
            670442572800.0,
            33522128640.0,
            1323241920.0,
            40840800.0,
            960960.0,
            16380.0,
            182.0,
            1.0,
        ],
        _ => unreachable!("unsupported Padé degree {degree}"),
    };
    let n = a.nrows();
    let id = DMatrix::<T>::identity(n, n);
    let c = |k: usize| T::lit(b[k]);
    let a2 = a * a;
    let (u, v) = if degree == 13 {
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let inner_u = &a6 * c(13) + &a4 * c(11) + &a2 * c(9);
        let u = a * (&a6 * inner_u + &a6 * c(7) + &a4 * c(5) + &a2 * c(3) + &id * c(1));
        let inner_v = &a6 * c(12) + &a4 * c(10) + &a2 * c(8);
        let v = &a6 * inner_v + &a6 * c(6) + &a4 * c(4) + &a2 * c(2) + &id * c(0);
        (u, v)
    } else {
        // Powers A^0, A^2, A^4, ...
        let mut pow = id.clone();
        let mut u_acc = DMatrix::<T>::zeros(n, n);
        let mut v_acc = DMatrix::<T>::zeros(n, n);
        for k in (0..=degree).step_by(2) {
            v_acc += &pow * c(k);
            u_acc += &pow * c(k + 1);
            pow = &pow * &a2;
        }
        (a * u_acc, v_acc)
    };
    let num = &v + &u;
    let den = &v - &u;
    den.lu().solve(&num).unwrap_or_else(|| {
        // The denominator is well conditioned for the θ bounds above; an LU
        // failure means non-finite input slipped through.
        DMatrix::from_element(n, n, T::lit(f64::NAN))
    })
}

/// `e^{tA}x`.
pub fn expm_apply<T: Real>(a: &LinearOperator<T>, t: T, x: &DVector<T>) -> Result<DVector<T>> {
    check_dim(x, a.dim(), "x")?;
    ensure!(t.is_finite(), Input, "time must be finite, got {t}");
    check_finite_vec(x, "x")?;
    if t == T::zero() {
        return Ok(x.clone());
    }
    Ok(a.exp(t) * x)
}

/// Symmetric positive semidefinite operator (a covariance).
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceOperator<T: Real> {
    matrix: DMatrix<T>,
}

impl<T: Real> CovarianceOperator<T> {
    /// Validates symmetry (relative 1e-12) and `λ_min ≥ −1e-10·tr`. The stored
    /// matrix is the exact symmetric part of the input.
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        let op = LinearOperator::new(matrix)?;
        let m = op.matrix;
        let scale = T::one() + max_abs(&m);
        let asym = max_abs(&(&m - m.transpose()));
        ensure!(
            asym <= T::tol(SYMMETRY_TOL) * scale,
            Input,
            "covariance is not symmetric (max asymmetry {asym})"
        );
        let sym = (&m + m.transpose()) * T::lit(0.5);
        let min_eig = symmetric_eigen(&sym)?.eigenvalues.min();
        let trace = sym.trace();
        ensure!(
            min_eig >= -T::tol(PSD_TOL) * trace.max(T::zero()) || min_eig >= T::zero(),
            Input,
            "covariance is not positive semidefinite (min eigenvalue {min_eig}, trace {trace})"
        );
        Ok(Self { matrix: sym })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { matrix: DMatrix::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: DMatrix::identity(dim, dim) }
    }

    pub fn diagonal(diag: &[T]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn trace(&self) -> T {
        self.matrix.trace()
    }

    /// `⟨C h, h⟩`.
    pub fn quadratic_form(&self, h: &DVector<T>) -> T {
        (&self.matrix * h).dot(h)
    }

    pub fn min_eigenvalue(&self) -> Result<T> {
        Ok(symmetric_eigen(&self.matrix)?.eigenvalues.min())
    }

    pub fn symmetry_residual(&self) -> T {
        max_abs(&(&self.matrix - self.matrix.transpose()))
    }
}

fn symmetric_eigen<T: Real>(m: &DMatrix<T>) -> Result<SymmetricEigen<T, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m.clone(), T::default_epsilon(), 10_000).ok_or_else(|| {
        let diag = m.diagonal();
        Error::Numerical(format!(
            "symmetric eigendecomposition did not converge (dim {}, max |entry| {}, diagonal range [{}, {}])",
            m.nrows(),
            max_abs(m),
            diag.min(),
            diag.max()
        ))
    })
}

/// `Q_t = ∫_0^t e^{sA} Q e^{sA*} ds` by composite Gauss–Legendre with `steps`
/// panels of [`PANEL_ORDER`] points.
pub fn covariance_qt<T: Real>(
    a: &LinearOperator<T>,
    q: &CovarianceOperator<T>,
    t: T,
    steps: usize,
) -> Result<CovarianceOperator<T>> {
    ensure!(t.is_finite() && t >= T::zero(), Input, "Q_t needs finite t >= 0, got {t}");
    ensure!(steps >= 1, Input, "Q_t needs at least one quadrature panel");
    ensure!(
        a.dim() == q.dim(),
        Contract,
        "A acts on R^{} but Q on R^{}",
        a.dim(),
        q.dim()
    );
    let d = a.dim();
    if t == T::zero() {
        return Ok(CovarianceOperator::zeros(d));
    }
    let width = t / T::from_usize_lossy(steps);
    let (x, w) = gauss_legendre(PANEL_ORDER);
    let half = width * T::lit(0.5);
    // e^{sA} at node s = k·width + τ_j is (e^{width·A})^k e^{τ_j A}.
    let node_exps: Vec<(DMatrix<T>, T)> = x
        .iter()
        .zip(&w)
        .map(|(&xi, &wi)| (a.exp(half * (T::one() + T::lit(xi))), half * T::lit(wi)))
        .collect();
    let step = a.exp(width);
    let mut power = DMatrix::<T>::identity(d, d);
    let mut acc = DMatrix::<T>::zeros(d, d);
    for _ in 0..steps {
        for (e_node, weight) in &node_exps {
            let s = &power * e_node;
            acc += (&s * q.matrix() * s.transpose()) * *weight;
        }
        power = &power * &step;
    }
    let sym = (&acc + acc.transpose()) * T::lit(0.5);
    CovarianceOperator::new(sym)
}

/// Draws from `N(0, C)` through the eigendecomposition of `C`, with negative
/// eigenvalues clamped to zero and null directions dropped.
#[derive(Clone, Debug)]
pub struct GaussianSampler<T: Real> {
    dim: usize,
    /// `d × r` factor `U_r Λ_r^{1/2}` over the positive eigenvalues.
    factor: DMatrix<T>,
    /// Orthonormal eigenvectors and standard deviations of the retained directions.
    basis: DMatrix<T>,
    std_devs: Vec<T>,
}

impl<T: Real> GaussianSampler<T> {
    pub fn new(cov: &CovarianceOperator<T>) -> Result<Self> {
        let d = cov.dim();
        let eig = symmetric_eigen(cov.matrix())?;
        let lmax = eig.eigenvalues.iter().fold(T::zero(), |m, v| m.max(*v));
        let cutoff = lmax * T::default_epsilon() * T::from_usize_lossy(16 * d);
        let keep: Vec<usize> = (0..d).filter(|&k| eig.eigenvalues[k] > cutoff).collect();
        let r = keep.len();
        let mut basis = DMatrix::<T>::zeros(d, r);
        let mut std_devs = Vec::with_capacity(r);
        for (col, &k) in keep.iter().enumerate() {
            basis.set_column(col, &eig.eigenvectors.column(k));
            std_devs.push(eig.eigenvalues[k].max(T::zero()).sqrt());
        }
        let mut factor = basis.clone();
        for (col, s) in std_devs.iter().enumerate() {
            factor.column_mut(col).scale_mut(*s);
        }
        Ok(Self { dim: d, factor, basis, std_devs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of retained (positive-variance) directions.
    pub fn rank(&self) -> usize {
        self.std_devs.len()
    }

    pub fn factor(&self) -> &DMatrix<T> {
        &self.factor
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    pub fn std_devs(&self) -> &[T] {
        &self.std_devs
    }

    /// Maps standard normal coordinates (length `rank`) to a sample.
    pub fn transform(&self, z: &DVector<T>) -> DVector<T> {
        &self.factor * z
    }

    pub fn sample(&self, rng: &mut StreamRng) -> DVector<T> {
        let mut y = DVector::zeros(self.dim);
        self.sample_add(rng, &mut y);
        y
    }

    /// `y += sample`, without allocating when the rank is small.
    pub fn sample_add(&self, rng: &mut StreamRng, y: &mut DVector<T>) {
        for col in 0..self.rank() {
            let z: T = rng.normal();
            y.axpy(z, &self.factor.column(col), T::one());
        }
    }
}

/// `n` i.i.d. draws from `N(0, C)`; sample `i` uses random stream `i` of `seed`.
pub fn gaussian_sample<T: Real>(
    c: &CovarianceOperator<T>,
    n: usize,
    seed: u64,
) -> Result<Vec<DVector<T>>> {
    ensure!(n >= 1, Input, "need at least one sample");
    let sampler = GaussianSampler::new(c)?;
    Ok((0..n)
        .map(|i| sampler.sample(&mut StreamRng::new(seed, i as u64)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn taylor_expm(m: &DMatrix<f64>) -> DMatrix<f64> {
        // Independent oracle: scale to small norm, sum 30 Taylor terms, square back.
        let n = m.nrows();
        let norm = m.norm();
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let a = m / 2f64.powi(s);
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn expm_identity_at_zero_time() {
        let a = LinearOperator::from_row_slice(2, &[0.3, -1.0, 2.0, 0.1]).unwrap();
        let x = DVector::from_vec(vec![1.5, -2.0]);
        assert_eq!(expm_apply(&a, 0.0, &x).unwrap(), x);
    }

    #[test]
    fn expm_scalar_doubling() {
        let a = LinearOperator::from_row_slice(1, &[1.0]).unwrap();
        let y = expm_apply(&a, 2f64.ln(), &DVector::from_vec(vec![1.0])).unwrap();
        assert_relative_eq!(y[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn expm_nilpotent() {
        let a = LinearOperator::from_row_slice(2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let y = expm_apply(&a, 1.0, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 1.0]);
        let oracle = taylor_expm(a.matrix()) * DVector::from_vec(vec![0.0, 1.0]);
        assert_relative_eq!(oracle[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn expm_matches_taylor_oracle_across_degrees() {
        for scale in [1e-3, 0.1, 0.5, 1.5, 4.0, 20.0] {
            let m = DMatrix::from_row_slice(3, 3, &[0.2, -1.0, 0.4, 0.7, -0.3, 0.1, -0.5, 0.9, 0.0]) * scale;
            let got = expm(&m);
            let want = taylor_expm(&m);
            let rel = (&got - &want).norm() / want.norm();
            assert!(rel < 1e-12, "scale {scale}: rel err {rel}");
        }
    }

    #[test]
    fn expm_errors() {
        let a = LinearOperator::<f64>::identity(2);
        assert!(matches!(
            expm_apply(&a, 1.0, &DVector::from_vec(vec![1.0])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            expm_apply(&a, f64::NAN, &DVector::from_vec(vec![1.0, 0.0])),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            expm_apply(&a, 1.0, &DVector::from_vec(vec![f64::INFINITY, 0.0])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn self_adjoint_flag_is_checked() {
        assert!(LinearOperator::self_adjoint(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_ok());
        assert!(LinearOperator::self_adjoint(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 1.0])).is_err());
        assert!(LinearOperator::<f64>::new(DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).is_err());
    }

    #[test]
    fn qt_trivial_cases() {
        let a = LinearOperator::from_row_slice(2, &[0.3, -1.0, 2.0, 0.1]).unwrap();
        let q = CovarianceOperator::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let q0 = covariance_qt(&a, &q, 0.0, 64).unwrap();
        assert_eq!(q0.matrix(), &DMatrix::zeros(2, 2));

        let zero = LinearOperator::zeros(2);
        let qt = covariance_qt(&zero, &q, 1.7, 64).unwrap();
        assert!((qt.matrix() - q.matrix() * 1.7).amax() < 1e-13);

        assert!(matches!(covariance_qt(&a, &q, -1.0, 64), Err(Error::Input(_))));
    }

    #[test]
    fn qt_scalar_closed_form() {
        // Oracle: antiderivative q (e^{2at} - 1) / (2a), plus a fine midpoint sum.
        for (a, q, t) in [(-0.7f64, 1.3f64, 2.0f64), (0.4, 0.5, 1.0), (-2.0, 3.0, 0.25)] {
            let qt = covariance_qt(
                &LinearOperator::from_row_slice(1, &[a]).unwrap(),
                &CovarianceOperator::diagonal(&[q]).unwrap(),
                t,
                64,
            )
            .unwrap();
            let closed = q * ((2.0 * a * t).exp() - 1.0) / (2.0 * a);
            let n = 200_000;
            let h = t / n as f64;
            let midpoint: f64 = (0..n).map(|k| q * (2.0 * a * (k as f64 + 0.5) * h).exp() * h).sum();
            assert_relative_eq!(qt.matrix()[(0, 0)], closed, max_relative = 1e-13);
            assert_relative_eq!(midpoint, closed, max_relative = 1e-8);
        }
    }

    #[test]
    fn qt_is_converged_under_panel_doubling() {
        let a = LinearOperator::from_row_slice(3, &[-1.0, 0.5, 0.0, 0.2, -0.3, 1.0, 0.0, -0.8, 0.4]).unwrap();
        let q = CovarianceOperator::new(DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.3])).unwrap();
        let coarse = covariance_qt(&a, &q, 2.0, 64).unwrap();
        let fine = covariance_qt(&a, &q, 2.0, 128).unwrap();
        assert!((coarse.matrix() - fine.matrix()).amax() < 1e-10);
        assert!(coarse.symmetry_residual() <= 1e-12);
    }

    #[test]
    fn covariance_validation() {
        assert!(CovarianceOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.1, 1.0])).is_err());
        assert!(CovarianceOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5])).is_err());
        // Slightly negative eigenvalue within tolerance is accepted.
        assert!(CovarianceOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12])).is_ok());
    }

    #[test]
    fn degenerate_gaussian_is_zero() {
        let s = gaussian_sample(&CovarianceOperator::<f64>::zeros(3), 5, 11).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn gaussian_sample_is_reproducible() {
        let c = CovarianceOperator::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        assert_eq!(gaussian_sample(&c, 50, 9).unwrap(), gaussian_sample(&c, 50, 9).unwrap());
        assert_ne!(gaussian_sample(&c, 50, 9).unwrap(), gaussian_sample(&c, 50, 10).unwrap());
    }

    #[test]
    fn gaussian_sample_moments() {
        let n = 100_000;
        let s = gaussian_sample(&CovarianceOperator::<f64>::identity(2), n, 42).unwrap();
        let bound = 3.0 / (n as f64).sqrt();
        for k in 0..2 {
            let mean = s.iter().map(|v| v[k]).sum::<f64>() / n as f64;
            assert!(mean.abs() < bound, "coordinate {k} mean {mean}");
        }

        let c = CovarianceOperator::diagonal(&[1.0, 4.0]).unwrap();
        let s = gaussian_sample(&c, n, 43).unwrap();
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for v in &s {
            cov += v * v.transpose();
        }
        cov /= n as f64;
        assert!((cov[(0, 0)] - 1.0).abs() < 0.05);
        assert!((cov[(1, 1)] - 4.0).abs() < 0.05 * 4.0);
        assert!(cov[(0, 1)].abs() < 0.05);
    }

    #[test]
    fn rank_deficient_sampler_drops_null_directions() {
        let c = CovarianceOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let sampler = GaussianSampler::new(&c).unwrap();
        assert_eq!(sampler.rank(), 1);
        let y = sampler.sample(&mut StreamRng::new(1, 0));
        assert_relative_eq!(y[0], y[1], epsilon = 1e-14);
    }

    #[test]
    fn works_in_single_precision() {
        let a = LinearOperator::<f32>::from_row_slice(2, &[-1.0, 0.0, 0.0, -0.5]).unwrap();
        let q = CovarianceOperator::<f32>::identity(2);
        let qt = covariance_qt(&a, &q, 1.0, 16).unwrap();
        let exact = (1.0 - (-2.0f32).exp()) / 2.0;
        assert!((qt.matrix()[(0, 0)] - exact).abs() < 1e-5);
    }
}
