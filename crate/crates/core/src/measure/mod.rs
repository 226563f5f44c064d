//! Measures and the dual semigroup `P_t*`.

mod analysis;
mod particles;
mod residual;

pub use analysis::{
    backward_pde_residual, backward_solution, bernstein_approx, cesaro_smooth, resolvent_apply,
    resolvent_identity_residual, resolvent_threshold, ResolventValue, BACKWARD_PANELS_PER_UNIT,
};
pub use particles::{
    dual_pushforward, duality_check, evolve, uniform_grid, DualityOutcome, DualitySampling, MeasureTrajectory,
    ParticleMeasure, SnapshotMeta, PROBABILITY_TOL,
};
pub use residual::{
    default_bank, measure_equation_residual, measure_equation_residual_streaming, measure_refinement_nested, MeasureResidual,
    NestedRefinement, BANK_FREQUENCIES,
    BANK_FREQUENCY_RANGE, BANK_LIMITS,
};
