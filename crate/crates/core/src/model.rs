//! Model data of the semilinear equation `dX = (AX + F(X)) dt + Q^{1/2} dW`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::{covariance_qt, operator_norm, CovarianceOperator, LinearOperator, DEFAULT_QT_STEPS};
use crate::rng::StreamRng;
use crate::scalar::Real;

/// Step of the central-difference fallback for `DF(x)[v]`.
pub const DRIFT_FD_STEP: f64 = 1e-6;

/// Globally Lipschitz nonlinearity `F: H → H`.
pub trait Drift<T: Real>: Send + Sync + Debug {
    fn apply(&self, x: &DVector<T>) -> DVector<T>;

    /// Directional derivative `DF(x)[v]`, when known in closed form.
    fn derivative(&self, _x: &DVector<T>, _v: &DVector<T>) -> Option<DVector<T>> {
        None
    }

    /// Declared Lipschitz constant `L_F`.
    fn lipschitz(&self) -> T;

    /// `sup |F|`, or `None` when `F` is unbounded.
    fn sup_norm(&self) -> Option<T>;

    /// Bound on `‖DF‖`; the Lipschitz constant unless something sharper is known.
    fn derivative_bound(&self) -> T {
        self.lipschitz()
    }

    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDrift;

impl<T: Real> Drift<T> for ZeroDrift {
    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        DVector::zeros(x.len())
    }
    fn derivative(&self, x: &DVector<T>, _v: &DVector<T>) -> Option<DVector<T>> {
        Some(DVector::zeros(x.len()))
    }
    fn lipschitz(&self) -> T {
        T::zero()
    }
    fn sup_norm(&self) -> Option<T> {
        Some(T::zero())
    }
    fn is_zero(&self) -> bool {
        true
    }
}

/// `F(x) = clamp(Bx, −c, c)` componentwise.
#[derive(Clone, Debug)]
pub struct ClippedLinear<T: Real> {
    pub matrix: DMatrix<T>,
    pub clip: T,
}

impl<T: Real> Drift<T> for ClippedLinear<T> {
    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        (&self.matrix * x).map(|v| v.clamp(-self.clip, self.clip))
    }
    fn derivative(&self, x: &DVector<T>, v: &DVector<T>) -> Option<DVector<T>> {
        let bx = &self.matrix * x;
        let mut dv = &self.matrix * v;
        for (out, b) in dv.iter_mut().zip(bx.iter()) {
            if b.abs() > self.clip {
                *out = T::zero();
            }
        }
        Some(dv)
    }
    fn lipschitz(&self) -> T {
        operator_norm(&self.matrix)
    }
    fn sup_norm(&self) -> Option<T> {
        Some(self.clip * T::from_usize_lossy(self.matrix.nrows()).sqrt())
    }
}

/// `F(x) = s · tanh(Bx)` componentwise; `B = I` by default.
#[derive(Clone, Debug)]
pub struct TanhDrift<T: Real> {
    pub scale: T,
    pub coupling: DMatrix<T>,
}

impl<T: Real> TanhDrift<T> {
    pub fn diagonal(dim: usize, scale: T) -> Self {
        Self { scale, coupling: DMatrix::identity(dim, dim) }
    }
}

impl<T: Real> Drift<T> for TanhDrift<T> {
    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        (&self.coupling * x).map(|v| self.scale * v.tanh())
    }
    fn derivative(&self, x: &DVector<T>, v: &DVector<T>) -> Option<DVector<T>> {
        let bx = &self.coupling * x;
        let bv = &self.coupling * v;
        Some(bx.zip_map(&bv, |u, w| {
            let th = u.tanh();
            self.scale * (T::one() - th * th) * w
        }))
    }
    fn lipschitz(&self) -> T {
        self.scale.abs() * operator_norm(&self.coupling)
    }
    fn sup_norm(&self) -> Option<T> {
        Some(self.scale.abs() * T::from_usize_lossy(self.coupling.nrows()).sqrt())
    }
}

/// Serializable description of a named drift preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum DriftSpec<T> {
    Zero,
    /// Row-major `B` and clip level `c`.
    Linear { matrix: Vec<T>, clip: T },
    /// Scale `s` and optional row-major coupling `B` (identity when absent).
    Tanh {
        scale: T,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coupling: Option<Vec<T>>,
    },
}

impl<T: Real> DriftSpec<T> {
    pub fn build(&self, dim: usize) -> Result<Arc<dyn Drift<T>>> {
        let square = |entries: &[T], what: &str| -> Result<DMatrix<T>> {
            ensure!(
                entries.len() == dim * dim,
                Input,
                "{what} needs {} entries, got {}",
                dim * dim,
                entries.len()
            );
            ensure!(entries.iter().all(|v| v.is_finite()), Input, "{what} has non-finite entries");
            Ok(DMatrix::from_row_slice(dim, dim, entries))
        };
        Ok(match self {
            DriftSpec::Zero => Arc::new(ZeroDrift),
            DriftSpec::Linear { matrix, clip } => {
                ensure!(*clip > T::zero() && clip.is_finite(), Input, "linear drift clip must be positive and finite");
                Arc::new(ClippedLinear { matrix: square(matrix, "linear drift matrix")?, clip: *clip })
            }
            DriftSpec::Tanh { scale, coupling } => {
                ensure!(scale.is_finite(), Input, "tanh drift scale must be finite");
                let coupling = match coupling {
                    Some(c) => square(c, "tanh coupling")?,
                    None => DMatrix::identity(dim, dim),
                };
                Arc::new(TanhDrift { scale: *scale, coupling })
            }
        })
    }
}

/// `(A, Q, F, M, ω)` on `R^d`: `A` generates `e^{tA}` with `‖e^{tA}‖ ≤ M e^{ωt}`,
/// `Q` is the noise covariance and `F` a Lipschitz drift.
#[derive(Clone, Debug)]
pub struct GalerkinModel<T: Real> {
    a: LinearOperator<T>,
    q: CovarianceOperator<T>,
    drift: Arc<dyn Drift<T>>,
    growth_m: T,
    growth_omega: T,
}

impl<T: Real> GalerkinModel<T> {
    /// Growth constants default to `M = 1`, `ω = λ_max((A + A*)/2)`.
    pub fn new(a: LinearOperator<T>, q: CovarianceOperator<T>, drift: Arc<dyn Drift<T>>) -> Result<Self> {
        ensure!(
            a.dim() == q.dim(),
            Contract,
            "A acts on R^{} but Q on R^{}",
            a.dim(),
            q.dim()
        );
        let omega = a.log_norm();
        let model = Self { a, q, drift, growth_m: T::one(), growth_omega: omega };
        let f0 = model.drift.apply(&DVector::zeros(model.dim()));
        ensure!(f0.len() == model.dim(), Contract, "drift maps R^{} into R^{}", model.dim(), f0.len());
        ensure!(f0.iter().all(|v| v.is_finite()), Input, "F(0) is not finite");
        ensure!(model.drift.lipschitz().is_finite(), Input, "Lipschitz constant must be finite");
        Ok(model)
    }

    /// Ornstein–Uhlenbeck model (`F = 0`).
    pub fn ornstein_uhlenbeck(a: LinearOperator<T>, q: CovarianceOperator<T>) -> Result<Self> {
        Self::new(a, q, Arc::new(ZeroDrift))
    }

    /// Overrides the growth constants; `M ≥ 1` is required.
    pub fn with_growth(mut self, m: T, omega: T) -> Result<Self> {
        ensure!(m >= T::one() && m.is_finite(), Input, "growth constant M must be finite and >= 1, got {m}");
        ensure!(omega.is_finite(), Input, "growth exponent must be finite");
        self.growth_m = m;
        self.growth_omega = omega;
        Ok(self)
    }

    pub fn with_drift(&self, drift: Arc<dyn Drift<T>>) -> Result<Self> {
        Self::new(self.a.clone(), self.q.clone(), drift)?.with_growth(self.growth_m, self.growth_omega)
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn a(&self) -> &LinearOperator<T> {
        &self.a
    }

    pub fn q(&self) -> &CovarianceOperator<T> {
        &self.q
    }

    pub fn drift(&self) -> &Arc<dyn Drift<T>> {
        &self.drift
    }

    pub fn is_ou(&self) -> bool {
        self.drift.is_zero()
    }

    pub fn growth_m(&self) -> T {
        self.growth_m
    }

    pub fn growth_omega(&self) -> T {
        self.growth_omega
    }

    pub fn lipschitz(&self) -> T {
        self.drift.lipschitz()
    }

    /// `M e^{ωt}`.
    pub fn growth_bound(&self, t: T) -> T {
        self.growth_m * (self.growth_omega * t).exp()
    }

    /// `e^{tA}`.
    pub fn semigroup(&self, t: T) -> DMatrix<T> {
        self.a.exp(t)
    }

    /// `Q_t` with the default quadrature.
    pub fn qt(&self, t: T) -> Result<CovarianceOperator<T>> {
        covariance_qt(&self.a, &self.q, t, DEFAULT_QT_STEPS)
    }

    pub fn drift_at(&self, x: &DVector<T>) -> DVector<T> {
        self.drift.apply(x)
    }

    /// `DF(x)[v]`: closed form when the drift has one, else central differences.
    pub fn drift_derivative(&self, x: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        if let Some(d) = self.drift.derivative(x, v) {
            return d;
        }
        let eps = T::lit(DRIFT_FD_STEP);
        let plus = self.drift.apply(&(x + v * eps));
        let minus = self.drift.apply(&(x - v * eps));
        (plus - minus) / (eps + eps)
    }

    /// Spot-checks the model hypotheses: `‖e^{tA}‖ ≤ M e^{ωt}` on `t ∈ {0, 0.1, …, 2}`
    /// and an empirical Lipschitz ratio `≤ 1.01 L_F` over random pairs.
    pub fn validate(&self, seed: u64) -> Result<()> {
        for k in 0..=20 {
            let t = T::lit(0.1 * k as f64);
            let norm = operator_norm(&self.a.exp(t));
            let bound = self.growth_bound(t);
            ensure!(
                norm <= bound * (T::one() + T::tol(1e-12)),
                Input,
                "‖e^{{tA}}‖ = {norm} exceeds M e^{{ωt}} = {bound} at t = {t}"
            );
        }
        let mut rng = StreamRng::new(seed, 0);
        let d = self.dim();
        let lf = self.lipschitz();
        for _ in 0..200 {
            let x = DVector::<T>::from_fn(d, |_, _| rng.normal::<T>() * T::lit(3.0));
            let y = &x + DVector::<T>::from_fn(d, |_, _| rng.normal::<T>());
            let dist = (&x - &y).norm();
            if dist == T::zero() {
                continue;
            }
            let ratio = (self.drift.apply(&x) - self.drift.apply(&y)).norm() / dist;
            ensure!(
                ratio <= T::lit(1.01) * lf + T::tol(1e-12),
                Input,
                "empirical Lipschitz ratio {ratio} exceeds declared L_F = {lf}"
            );
        }
        Ok(())
    }
}
