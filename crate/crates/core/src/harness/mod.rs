//! Verification harness: runs the selected suites of a scenario and writes a
//! JSON report, plot data and a checksum manifest.

mod config;
mod report;
mod suites;

use std::fs;
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use config::{
    MatrixSpec, ModelConfig, RunConfig, ScenarioConfig, DEFAULT_SEED, MAX_DIM, MAX_GRID_STEPS, MAX_INSTANCES,
    MAX_PARTICLES, MAX_SAMPLES, SCHEMA_VERSION,
};
pub use report::{CheckRecord, Series, Summary, VerificationReport};
pub use suites::{is_known_identity, loglog_slope, run_suite, Suite, SuiteContext, IDENTITIES};

/// Report plus the plot series gathered along the way.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: VerificationReport,
    pub series: Vec<Series>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs every selected suite. Check failures are recorded, not returned; only
/// an invalid configuration is an error.
pub fn run_scenario(config: &ScenarioConfig, timings: bool) -> Result<RunOutput> {
    config.validate()?;
    let model = config.build_model()?;
    let canonical = serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    let mut report = VerificationReport::new(config.run.seed, sha256_hex(canonical.as_bytes()));
    let mut series = Vec::new();
    for suite in config.selected_suites() {
        report.suites.push(suite.name().to_string());
        let mut ctx = SuiteContext::new(config, model.clone(), suite);
        let start = Instant::now();
        run_suite(suite, &mut ctx);
        let elapsed = start.elapsed().as_millis() as u64;
        for mut record in ctx.records {
            record.suite = suite.name().to_string();
            if timings {
                record.runtime_ms = Some(elapsed);
            }
            report.push(record);
        }
        series.extend(ctx.series);
    }
    Ok(RunOutput { report, series })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `residuals.csv` (one row per check) and one CSV per series under `dir`.
pub fn emit_plotdata(output: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut table = String::from("suite,identity,residual,tolerance,pass\n");
    for c in &output.report.checks {
        let residual = c.residual.map_or_else(|| "nan".to_string(), |r| r.to_string());
        table.push_str(&format!("{},{},{},{},{}\n", c.suite, c.identity, residual, c.tolerance, c.pass));
    }
    write(&dir.join("residuals.csv"), &table)?;
    for s in &output.series {
        write(&dir.join(format!("{}.csv", s.name)), &s.to_csv())?;
    }
    Ok(())
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, base, out)?;
        } else if let Ok(rel) = path.strip_prefix(base) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Writes `MANIFEST.sha256` listing the SHA-256 of every other file under `dir`,
/// in `sha256sum` format and sorted by path.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.retain(|f| f != "MANIFEST.sha256");
    files.sort();
    let mut text = String::new();
    for f in &files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        text.push_str(&format!("{}  {}\n", sha256_hex(&bytes), f));
    }
    write(&dir.join("MANIFEST.sha256"), &text)
}

/// Writes `report.json`, the plot data under `plotdata/` and the manifest.
pub fn write_outputs(output: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("report.json"), &output.report.to_json()?)?;
    emit_plotdata(output, &dir.join("plotdata"))?;
    write_manifest(dir)
}
