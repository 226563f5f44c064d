//! Verification reports and plot series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one identity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub suite: String,
    pub identity: String,
    /// The identity being checked, as a formula.
    pub paper_ref: String,
    /// `None` when the check could not be evaluated.
    pub residual: Option<f64>,
    /// For stochastic checks this already includes the `3·stderr` allowance.
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    /// Wall time; only recorded when timings are requested, so that reports
    /// stay byte-identical across runs by default.
    pub runtime_ms: Option<u64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckRecord {
    /// Deterministic check: passes iff `residual ≤ tolerance`.
    pub fn deterministic(identity: &str, formula: &str, residual: f64, tolerance: f64, seed: u64) -> Self {
        Self {
            suite: String::new(),
            identity: identity.into(),
            paper_ref: formula.into(),
            residual: Some(residual).filter(|r| r.is_finite()),
            tolerance,
            pass: residual <= tolerance,
            stderr: None,
            runtime_ms: None,
            seed,
            note: None,
        }
    }

    /// Stochastic check: passes iff `residual ≤ 3·stderr + slack`.
    pub fn stochastic(identity: &str, formula: &str, residual: f64, stderr: f64, slack: f64, seed: u64) -> Self {
        let tolerance = 3.0 * stderr + slack;
        Self {
            stderr: Some(stderr),
            ..Self::deterministic(identity, formula, residual, tolerance, seed)
        }
    }

    /// A check whose evaluation raised an error (e.g. a path blow-up).
    pub fn failed(identity: &str, formula: &str, seed: u64, reason: String) -> Self {
        Self {
            pass: false,
            note: Some(reason),
            ..Self::deterministic(identity, formula, f64::NAN, 0.0, seed)
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub seed: u64,
    /// SHA-256 of the canonical configuration text.
    pub config_sha256: String,
    pub suites: Vec<String>,
    pub checks: Vec<CheckRecord>,
    pub summary: Summary,
}

impl VerificationReport {
    pub fn new(seed: u64, config_sha256: String) -> Self {
        Self {
            schema_version: super::config::SCHEMA_VERSION,
            seed,
            config_sha256,
            suites: Vec::new(),
            checks: Vec::new(),
            summary: Summary::default(),
        }
    }

    pub fn push(&mut self, record: CheckRecord) {
        self.summary.total += 1;
        if record.pass {
            self.summary.passed += 1;
        } else {
            self.summary.failed += 1;
        }
        self.checks.push(record);
    }

    pub fn all_passed(&self) -> bool {
        self.summary.failed == 0
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

/// A named table destined for one CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}
