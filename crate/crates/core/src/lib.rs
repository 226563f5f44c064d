//! Markov transition semigroups of semilinear stochastic evolution equations on a
//! Galerkin truncation `H = R^d`.
//!
//! The crate provides exact Ornstein–Uhlenbeck semigroups, Kolmogorov operators on
//! an explicit class of test functions, Monte Carlo transition semigroups for
//! Lipschitz drifts, the dual action on particle measures, and a verification
//! harness that checks the identities relating them.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the aliases below fix
//! `f64`, which is what the tolerances in the verification suites are calibrated for.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod ou;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod sde;
pub mod stats;
pub mod testfn;

pub use error::{Error, Result};
pub use scalar::Real;

pub type LinearOperator = linalg::LinearOperator<f64>;
pub type CovarianceOperator = linalg::CovarianceOperator<f64>;
pub type GalerkinModel = model::GalerkinModel<f64>;
pub type TestFunction = testfn::TestFunction<f64>;
pub type CompiledBank = testfn::CompiledBank<f64>;
pub type Estimate = stats::Estimate<f64>;
pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
pub type SemigroupHandle = sde::SemigroupHandle<f64>;
pub type ParticleMeasure = measure::ParticleMeasure<f64>;
