use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use semilab::linalg::{CovarianceOperator, LinearOperator};
use semilab::model::{ClippedLinear, GalerkinModel, TanhDrift};
use semilab::rng::StreamRng;
use semilab::sde::{first_variation, simulate_mild, simulate_mild_trajectory, ExponentialEuler, SemigroupHandle, Trajectory};
use semilab::testfn::{Part, TestFunction};

fn tanh_model() -> GalerkinModel<f64> {
    let a = LinearOperator::from_row_slice(2, &[-1.0, 0.5, 0.0, -2.0]).unwrap();
    let q = CovarianceOperator::new(DMatrix::identity(2, 2) * 0.5).unwrap();
    GalerkinModel::new(a, q, Arc::new(TanhDrift::diagonal(2, 1.5))).unwrap()
}

/// Mean-square distance at time 1 between exponential Euler with step 1/2^l
/// and with step 1/2^fine, driven by the same Brownian increments: the noise
/// of one coarse step is `e^{δA}ξ₁ + ξ₂` built from two fine ones.
fn strong_errors(model: &GalerkinModel<f64>, levels: &[u32], fine: u32, paths: usize) -> Vec<f64> {
    let x0 = DVector::from_vec(vec![0.8, -0.4]);
    let mut sums = vec![0.0; levels.len()];
    let steppers: Vec<ExponentialEuler<f64>> =
        (0..=fine).map(|l| ExponentialEuler::new(model, 0.5f64.powi(l as i32)).unwrap()).collect();
    for p in 0..paths {
        let mut rng = StreamRng::new(11, p as u64);
        let mut noise: Vec<DVector<f64>> = (0..1usize << fine).map(|_| steppers[fine as usize].noise().sample(&mut rng)).collect();
        let mut reference = None;
        for l in (0..=fine).rev() {
            let step = &steppers[l as usize];
            let mut x = x0.clone();
            for xi in &noise {
                x = step.deterministic(model, &x) + xi;
            }
            if l == fine {
                reference = Some(x.clone());
            }
            if let Some(k) = levels.iter().position(|&m| m == l) {
                sums[k] += (&x - reference.as_ref().unwrap()).norm_squared();
            }
            let prop = step.propagator();
            noise = noise.chunks(2).filter(|c| c.len() == 2).map(|c| prop * &c[0] + &c[1]).collect();
        }
    }
    sums.iter().map(|s| (s / paths as f64).sqrt()).collect()
}

#[test]
fn exponential_euler_converges_with_strong_order_one() {
    let model = tanh_model();
    let levels = [3, 4, 5, 6];
    let errors = strong_errors(&model, &levels, 10, 2000);
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..=2.4).contains(&ratio), "errors {errors:?}, ratio {ratio}");
    }
}

#[test]
fn ou_endpoints_have_the_closed_form_law() {
    // A = −I, Q = qI: mean e^{−t}x, variance q(1 − e^{−2t})/2 per coordinate.
    let q: f64 = 0.8;
    let model = GalerkinModel::ornstein_uhlenbeck(
        LinearOperator::scaled_identity(2, -1.0),
        CovarianceOperator::new(DMatrix::identity(2, 2) * q).unwrap(),
    )
    .unwrap();
    let x = DVector::from_vec(vec![1.0, -2.0]);
    let t: f64 = 0.7;
    let n = 40_000;
    let out = simulate_mild(&model, &x, t, 0.05, n, 3).unwrap();
    let var = q * (1.0 - (-2.0 * t).exp()) / 2.0;
    for k in 0..2 {
        let vals: Vec<f64> = out.positions.iter().map(|p| p[k]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let emp = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - (-t).exp() * x[k]).abs() < 4.0 * (var / n as f64).sqrt());
        assert!((emp / var - 1.0).abs() < 0.03, "variance {emp} vs {var}");
    }
}

#[test]
fn tangent_of_an_unclipped_linear_drift_is_the_discrete_propagator() {
    // A = −I, F(x) = βx far from the clip: each step multiplies η by e^{−δ}(1 + βδ).
    let beta = 0.3;
    let model = GalerkinModel::new(
        LinearOperator::scaled_identity(2, -1.0),
        CovarianceOperator::new(DMatrix::identity(2, 2) * 0.01).unwrap(),
        Arc::new(ClippedLinear { matrix: DMatrix::identity(2, 2) * beta, clip: 1e6 }),
    )
    .unwrap();
    let (dt, steps): (f64, i32) = (0.05, 20);
    let h = DVector::from_vec(vec![0.6, -1.1]);
    let factor = ((-dt).exp() * (1.0 + beta * dt)).powi(steps);
    let samples = first_variation(&model, &DVector::from_vec(vec![0.2, 0.1]), &h, dt * steps as f64, dt, 50, 5).unwrap();
    for s in samples {
        assert!((&s.tangent - &h * factor).norm() < 1e-12);
    }
}

#[test]
fn trajectory_csv_round_trips() {
    let model = tanh_model();
    let traj = simulate_mild_trajectory(&model, &DVector::from_vec(vec![0.1, 0.2]), 0.3, 0.1, 3, 9).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("sample,step,time,x_1,x_2\n"));
    let back = Trajectory::read_csv(buf.as_slice(), 9).unwrap();
    assert_eq!(back.times, traj.times);
    assert_eq!(back.paths, traj.paths);
}

#[test]
fn monte_carlo_handle_matches_exact_handle_on_ou() {
    let model: GalerkinModel<f64> = GalerkinModel::ornstein_uhlenbeck(
        LinearOperator::from_row_slice(2, &[-1.0, 0.3, -0.2, -0.5]).unwrap(),
        CovarianceOperator::diagonal(&[0.5, 1.0]).unwrap(),
    )
    .unwrap();
    let phi = TestFunction::cylindrical(vec![0.7, -0.4], Part::Real);
    let x = DVector::from_vec(vec![0.3, 1.0]);
    let exact = SemigroupHandle::exact_ou(model.clone(), 2, 0).unwrap().transition_apply(&phi, 0.8, &x).unwrap();
    let mc = SemigroupHandle::monte_carlo(model, 0.01, 50_000, 4).unwrap().transition_apply(&phi, 0.8, &x).unwrap();
    assert_eq!(exact.stderr, 0.0);
    assert!((mc.value - exact.value).abs() < 4.0 * mc.stderr, "{mc:?} vs {exact:?}");
}
