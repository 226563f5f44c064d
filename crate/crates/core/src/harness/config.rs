//! Scenario configuration: model, run parameters and suite selection, read from
//! JSON with a versioned schema.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CovarianceOperator, LinearOperator};
use crate::model::{DriftSpec, GalerkinModel};

use super::suites::Suite;

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_DIM: usize = 64;
pub const MAX_PARTICLES: usize = 10_000_000;
pub const MAX_SAMPLES: usize = 10_000_000;
pub const MAX_INSTANCES: usize = 10_000;
pub const MAX_GRID_STEPS: usize = 100_000;
pub const DEFAULT_SEED: u64 = 20_240_917;

/// A square operator given by entries or by a named preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixSpec {
    Zero,
    /// `scale · I`.
    ScaledIdentity { scale: f64 },
    Diagonal { diagonal: Vec<f64> },
    /// Row-major `d × d` entries.
    Entries { entries: Vec<f64> },
}

impl MatrixSpec {
    fn build(&self, dim: usize, field: &str) -> Result<DMatrix<f64>> {
        let bad = |message: String| Error::Config { field: field.to_string(), message };
        let m = match self {
            MatrixSpec::Zero => DMatrix::zeros(dim, dim),
            MatrixSpec::ScaledIdentity { scale } => DMatrix::identity(dim, dim) * *scale,
            MatrixSpec::Diagonal { diagonal } => {
                if diagonal.len() != dim {
                    return Err(bad(format!("expected {dim} diagonal entries, got {}", diagonal.len())));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(diagonal))
            }
            MatrixSpec::Entries { entries } => {
                if entries.len() != dim * dim {
                    return Err(bad(format!("expected {} entries, got {}", dim * dim, entries.len())));
                }
                DMatrix::from_row_slice(dim, dim, entries)
            }
        };
        if !m.iter().all(|v| v.is_finite()) {
            return Err(bad("entries must be finite".into()));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub a: MatrixSpec,
    pub q: MatrixSpec,
    #[serde(default = "zero_drift")]
    pub drift: DriftSpec<f64>,
    /// Growth constants of `‖e^{tA}‖ ≤ M e^{ωt}`; default `M = 1`, `ω` = log-norm of `A`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_omega: Option<f64>,
}

fn zero_drift() -> DriftSpec<f64> {
    DriftSpec::Zero
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Final time of trajectory-based suites.
    pub horizon: f64,
    /// Number of steps of the uniform snapshot grid on `[0, horizon]`.
    pub grid_steps: usize,
    /// Exponential-Euler step of Monte Carlo handles.
    pub dt: f64,
    pub particles: usize,
    pub samples: usize,
    /// Random instances per randomized check.
    pub instances: usize,
    pub seed: u64,
    /// Starting point; defaults to `(0.5, …, 0.5)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Resolvent parameter; defaults to `max(0, ω + M L_F) + 1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Overrides keyed by check identity.
    pub tolerances: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            grid_steps: 64,
            dt: 0.01,
            particles: 20_000,
            samples: 20_000,
            instances: 20,
            seed: DEFAULT_SEED,
            x0: None,
            lambda: None,
            tolerances: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub run: RunConfig,
    /// Suite names; empty selects every suite.
    #[serde(default)]
    pub suites: Vec<String>,
}

impl ScenarioConfig {
    /// A `d`-dimensional Ornstein–Uhlenbeck scenario with `A = −I`, `Q = ½I`.
    pub fn ou_preset(dim: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig {
                dim,
                a: MatrixSpec::ScaledIdentity { scale: -1.0 },
                q: MatrixSpec::ScaledIdentity { scale: 0.5 },
                drift: DriftSpec::Zero,
                growth_m: None,
                growth_omega: None,
            },
            run: RunConfig::default(),
            suites: Vec::new(),
        }
    }

    /// Parses and validates; syntax errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config {
            field: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        let d = self.model.dim;
        if d == 0 || d > MAX_DIM {
            return bad("model.dim", format!("must be in 1..={MAX_DIM}, got {d}"));
        }
        let r = &self.run;
        if !(r.horizon.is_finite() && r.horizon > 0.0) {
            return bad("run.horizon", format!("must be positive and finite, got {}", r.horizon));
        }
        if !(r.dt.is_finite() && r.dt > 0.0) {
            return bad("run.dt", format!("must be positive and finite, got {}", r.dt));
        }
        if r.grid_steps == 0 || r.grid_steps > MAX_GRID_STEPS {
            return bad("run.grid_steps", format!("must be in 1..={MAX_GRID_STEPS}"));
        }
        if r.particles == 0 || r.particles > MAX_PARTICLES {
            return bad("run.particles", format!("must be in 1..={MAX_PARTICLES}"));
        }
        if r.samples < 2 || r.samples > MAX_SAMPLES {
            return bad("run.samples", format!("must be in 2..={MAX_SAMPLES}"));
        }
        if r.instances == 0 || r.instances > MAX_INSTANCES {
            return bad("run.instances", format!("must be in 1..={MAX_INSTANCES}"));
        }
        if let Some(x0) = &r.x0 {
            if x0.len() != d || !x0.iter().all(|v| v.is_finite()) {
                return bad("run.x0", format!("needs {d} finite entries"));
            }
        }
        if let Some(l) = r.lambda {
            if !(l.is_finite() && l > 0.0) {
                return bad("run.lambda", format!("must be positive and finite, got {l}"));
            }
        }
        for (key, value) in &r.tolerances {
            if !super::suites::is_known_identity(key) {
                return bad("run.tolerances", format!("unknown check identity `{key}`"));
            }
            if !(value.is_finite() && *value >= 0.0) {
                return bad("run.tolerances", format!("`{key}` must be finite and >= 0"));
            }
        }
        for name in &self.suites {
            if Suite::from_name(name).is_none() {
                return bad("suites", format!("unknown suite `{name}`; known: {}", Suite::names().join(", ")));
            }
        }
        self.build_model().map(|_| ())
    }

    pub fn build_model(&self) -> Result<GalerkinModel<f64>> {
        let d = self.model.dim;
        let wrap = |field: &'static str| move |e: Error| match e {
            Error::Config { .. } => e,
            other => Error::Config { field: field.into(), message: other.to_string() },
        };
        let a = LinearOperator::new(self.model.a.build(d, "model.a")?).map_err(wrap("model.a"))?;
        let q = CovarianceOperator::new(self.model.q.build(d, "model.q")?).map_err(wrap("model.q"))?;
        let drift = self.model.drift.build(d).map_err(wrap("model.drift"))?;
        let mut model = GalerkinModel::new(a, q, drift).map_err(wrap("model"))?;
        if self.model.growth_m.is_some() || self.model.growth_omega.is_some() {
            let m = self.model.growth_m.unwrap_or(model.growth_m());
            let w = self.model.growth_omega.unwrap_or(model.growth_omega());
            model = model.with_growth(m, w).map_err(wrap("model.growth_m"))?;
        }
        model.validate(self.run.seed).map_err(wrap("model"))?;
        Ok(model)
    }

    pub fn x0(&self) -> DVector<f64> {
        match &self.run.x0 {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::from_element(self.model.dim, 0.5),
        }
    }

    /// Selected suites in execution order (all when none are named).
    pub fn selected_suites(&self) -> Vec<Suite> {
        let mut picked: Vec<Suite> = if self.suites.is_empty() {
            Suite::ALL.to_vec()
        } else {
            self.suites.iter().filter_map(|s| Suite::from_name(s)).collect()
        };
        picked.sort();
        picked.dedup();
        picked
    }

    pub fn tolerance(&self, identity: &str, default: f64) -> f64 {
        self.run.tolerances.get(identity).copied().unwrap_or(default)
    }
}
