use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use semilab::harness::{MatrixSpec, ScenarioConfig};
use semilab::linalg::{covariance_qt, expm_apply, CovarianceOperator, LinearOperator};
use semilab::measure::{bernstein_approx, dual_pushforward, ParticleMeasure};
use semilab::model::{DriftSpec, GalerkinModel};
use semilab::ou::ou_exact_cyl;
use semilab::rng::{derive_seed, StreamRng};
use semilab::sde::SemigroupHandle;
use semilab::testfn::{CompiledBank, Part, TestFunction};

fn matrix(d: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, d * d).prop_map(move |v| DMatrix::from_row_slice(d, d, &v))
}

fn vector(d: usize, scale: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-scale..scale, d).prop_map(DVector::from_vec)
}

/// `A` with `‖A‖ ≤ 2` roughly, and `Q = LLᵀ`.
fn model(d: usize) -> impl Strategy<Value = GalerkinModel<f64>> {
    (matrix(d, 2.0 / d as f64), matrix(d, 1.0)).prop_map(move |(a, l)| {
        let q = &l * l.transpose();
        GalerkinModel::ornstein_uhlenbeck(LinearOperator::new(a).unwrap(), CovarianceOperator::new(q).unwrap()).unwrap()
    })
}

fn sized_model() -> impl Strategy<Value = (GalerkinModel<f64>, DVector<f64>, DVector<f64>)> {
    (1usize..=4).prop_flat_map(|d| (model(d), vector(d, 1.5), vector(d, 1.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn semigroup_law_of_the_matrix_exponential((m, x, _) in sized_model(), t in 0.0..1.0f64, s in 0.0..1.0f64) {
        let a = m.a();
        let whole = expm_apply(a, t + s, &x).unwrap();
        let split = expm_apply(a, t, &expm_apply(a, s, &x).unwrap()).unwrap();
        prop_assert!((&whole - &split).norm() <= 1e-10 * (1.0 + whole.norm()));
    }

    #[test]
    fn qt_is_symmetric_psd_and_splits((m, _, h) in sized_model(), t in 0.0..1.0f64, s in 0.0..1.0f64) {
        let qt = m.qt(t).unwrap();
        prop_assert!(qt.symmetry_residual() <= 1e-14);
        prop_assert!(qt.quadratic_form(&h) >= -1e-12);
        let es = m.semigroup(s);
        let rhs = m.qt(s).unwrap().matrix() + &es * qt.matrix() * es.transpose();
        prop_assert!((m.qt(t + s).unwrap().matrix() - rhs).amax() <= 1e-9);
    }

    #[test]
    fn qt_grows_monotonically((m, _, h) in sized_model(), t in 0.0..1.0f64, dt in 0.0..1.0f64) {
        let lo = covariance_qt(m.a(), m.q(), t, 64).unwrap().quadratic_form(&h);
        let hi = covariance_qt(m.a(), m.q(), t + dt, 64).unwrap().quadratic_form(&h);
        prop_assert!(hi >= lo - 1e-12);
    }

    #[test]
    fn ou_characteristic_function_is_bounded_and_starts_at_the_exponential((m, x, h) in sized_model(), t in 0.0..2.0f64) {
        let z = ou_exact_cyl(&m, t, &h, &x).unwrap();
        prop_assert!(z.re.hypot(z.im) <= 1.0 + 1e-12);
        let z0 = ou_exact_cyl(&m, 0.0, &h, &x).unwrap();
        let theta = h.dot(&x);
        prop_assert!((z0.re - theta.cos()).abs() <= 1e-14 && (z0.im - theta.sin()).abs() <= 1e-14);
    }

    #[test]
    fn kolmogorov_operator_matches_its_differential_form((m, x, h) in sized_model(), imag in any::<bool>()) {
        let part = if imag { Part::Imaginary } else { Part::Real };
        let bank = CompiledBank::compile(&m, &[TestFunction::cylindrical(h.as_slice().to_vec(), part)]).unwrap();
        let generic = 0.5 * (m.q().matrix() * bank.hessian(0, &x)).trace() + m.a().apply(&x).dot(&bank.gradient(0, &x));
        prop_assert!((bank.kolmogorov(0, &x) - generic).abs() <= 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences((m, x, h) in sized_model(), a in 0.2..1.5f64) {
        let phi = TestFunction::ou_integral(a, h.as_slice().to_vec(), Part::Real);
        let bank = CompiledBank::compile(&m, &[phi]).unwrap();
        let g = bank.gradient(0, &x);
        let eps = 1e-5;
        for i in 0..x.len() {
            let mut e = DVector::zeros(x.len());
            e[i] = eps;
            let fd = (bank.eval(0, &(&x + &e)) - bank.eval(0, &(&x - &e))) / (2.0 * eps);
            prop_assert!((fd - g[i]).abs() <= 1e-7);
        }
    }

    #[test]
    fn bernstein_reproduces_affine_functions(n in 1usize..60, t in 0.0..=1.0f64, a in -3.0..3.0f64, b in -3.0..3.0f64) {
        prop_assert!((bernstein_approx(|_| 1.0, n, t).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!((bernstein_approx(|s| a + b * s, n, t).unwrap() - (a + b * t)).abs() <= 1e-12);
    }

    #[test]
    fn pushforward_keeps_mass_and_does_not_grow_variation(
        (m, _, _) in sized_model(),
        weights in prop::collection::vec(-1.0..1.0f64, 1..6),
        seed in any::<u64>(),
    ) {
        let d = m.dim();
        let mut rng = StreamRng::new(seed, 0);
        let points: Vec<DVector<f64>> = weights.iter().map(|_| DVector::from_fn(d, |_, _| rng.normal())).collect();
        let mu = ParticleMeasure::from_points(&points, weights.clone(), "mu").unwrap();
        let handle = SemigroupHandle::exact_ou(m, 8, seed).unwrap();
        let pushed = dual_pushforward(&handle, &mu, 0.3, 4, seed).unwrap();
        prop_assert!((pushed.total_mass() - mu.total_mass()).abs() <= 1e-12);
        prop_assert!(pushed.total_variation() <= mu.total_variation() + 1e-12);
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let draw = |s| { let mut r = StreamRng::new(seed, s); (0..4).map(|_| r.normal::<f64>()).collect::<Vec<_>>() };
        prop_assert_eq!(draw(stream), draw(stream));
        prop_assert_ne!(draw(stream), draw(stream.wrapping_add(1)));
        prop_assert_ne!(derive_seed(seed, stream), derive_seed(seed, stream.wrapping_add(1)));
    }

    #[test]
    fn scenario_config_round_trips(
        d in 1usize..5,
        a in -2.0..0.0f64,
        q in 0.1..2.0f64,
        tanh in prop::option::of(0.1..2.0f64),
        seed in any::<u64>(),
        particles in 1usize..100_000,
    ) {
        let mut cfg = ScenarioConfig::ou_preset(d);
        cfg.model.a = MatrixSpec::ScaledIdentity { scale: a };
        cfg.model.q = MatrixSpec::Diagonal { diagonal: vec![q; d] };
        if let Some(s) = tanh {
            cfg.model.drift = DriftSpec::Tanh { scale: s, coupling: None };
        }
        cfg.run.seed = seed;
        cfg.run.particles = particles;
        let text = cfg.to_json().unwrap();
        let back = ScenarioConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}
