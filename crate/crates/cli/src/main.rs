//! `semilab`: run verification suites and measure evolutions from a scenario file.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use semilab::harness::{self, ScenarioConfig, Series, Suite, VerificationReport};
use semilab::measure::{evolve, resolvent_apply, resolvent_threshold, uniform_grid, ParticleMeasure};
use semilab::sde::SemigroupHandle;
use semilab::testfn::{Part, TestFunction};
use semilab::Error;

#[derive(Parser)]
#[command(name = "semilab", version, about = "Transition semigroups of semilinear SPDEs on a Galerkin truncation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON). Without it a 2-d Ornstein-Uhlenbeck preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 gives the reference single-thread mode.
    #[arg(long, global = true, env = "SEMILAB_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run verification suites (all of them when none are named).
    Verify {
        #[arg(value_delimiter = ',')]
        suites: Vec<String>,
        /// Record wall time per check (makes reports run-dependent).
        #[arg(long)]
        timings: bool,
    },
    /// Evolve δ_{x0} under the dual semigroup and write particle snapshots.
    Evolve {
        /// Write every n-th snapshot (the last one is always written).
        #[arg(long, default_value_t = 8)]
        every: usize,
    },
    /// Evaluate R(λ,K)f(x0) for f = cos<·,h> or sin<·,h>.
    Resolvent {
        /// Frequency vector h, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        freq: Vec<f64>,
        #[arg(long)]
        sin: bool,
        /// Tail tolerance of the truncated Laplace transform.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 64)]
        panels: usize,
    },
    /// Summarise a report written by `verify`.
    Report {
        /// Report file; defaults to <out>/report.json.
        path: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Input(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(common: &Common) -> Result<ScenarioConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            ScenarioConfig::from_json(&text)
                .map_err(|e| Failure::Config(anyhow!("{}: {e}", path.display())))?
        }
        None => ScenarioConfig::ou_preset(2),
    };
    if let Some(seed) = common.seed {
        config.run.seed = seed;
    }
    Ok(config)
}

fn handle_for(config: &ScenarioConfig) -> Result<SemigroupHandle<f64>, Failure> {
    let model = config.build_model()?;
    let r = &config.run;
    Ok(if model.is_ou() {
        SemigroupHandle::exact_ou(model, r.samples, r.seed)?
    } else {
        SemigroupHandle::monte_carlo(model, r.dt, r.samples, r.seed)?
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn verify(common: &Common, suites: Vec<String>, timings: bool) -> Result<bool, Failure> {
    let mut config = load_config(common)?;
    if !suites.is_empty() {
        config.suites = suites;
    }
    config.validate()?;
    let output = harness::run_scenario(&config, timings)?;
    harness::write_outputs(&output, &common.out)?;
    print_summary(&output.report);
    Ok(output.report.all_passed())
}

fn print_summary(report: &VerificationReport) {
    for c in &report.checks {
        let residual = c.residual.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3e}"));
        println!(
            "{} {:<18} {:<28} residual {:>10}  tol {:.3e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.suite,
            c.identity,
            residual,
            c.tolerance
        );
    }
    let s = report.summary;
    println!("{} checks, {} passed, {} failed", s.total, s.passed, s.failed);
}

fn evolve_cmd(common: &Common, every: usize) -> Result<bool, Failure> {
    let config = load_config(common)?;
    let handle = handle_for(&config)?;
    let r = &config.run;
    let x0 = config.x0();
    let mu = ParticleMeasure::dirac(&x0, r.particles)?;
    let times = uniform_grid(r.horizon, r.grid_steps);
    let traj = evolve(&handle, &mu, &times, r.seed)?;

    let dir = common.out.join("snapshots");
    create_dir(&dir)?;
    let d = x0.len();
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=d).map(|k| format!("mean_{k}")));
    columns.extend((1..=d).map(|k| format!("var_{k}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut moments = Series::new("moments", &cols);
    let every = every.max(1);
    for (k, snap) in traj.snapshots.iter().enumerate() {
        let mean = snap.mean();
        let cov = snap.covariance();
        let mut row = vec![traj.times[k]];
        row.extend(mean.iter());
        row.extend((0..d).map(|i| cov[(i, i)]));
        moments.push(row);
        if k % every != 0 && k + 1 != traj.len() {
            continue;
        }
        let csv = dir.join(format!("snapshot_{k:05}.csv"));
        let file = File::create(&csv).with_context(|| format!("creating {}", csv.display()))?;
        snap.write_csv(BufWriter::new(file))?;
        let meta = serde_json::to_string_pretty(&traj.meta(k)).context("serialising snapshot metadata")?;
        let side = dir.join(format!("snapshot_{k:05}.json"));
        fs::write(&side, meta + "\n").with_context(|| format!("writing {}", side.display()))?;
    }
    let plot = common.out.join("plotdata");
    create_dir(&plot)?;
    fs::write(plot.join("moments.csv"), moments.to_csv()).context("writing moments.csv")?;
    harness::write_manifest(&common.out)?;
    println!("{} snapshots of {} particles under {}", traj.len(), r.particles, common.out.display());
    Ok(true)
}

fn resolvent_cmd(common: &Common, freq: Vec<f64>, sin: bool, tol: f64, panels: usize) -> Result<bool, Failure> {
    let config = load_config(common)?;
    let handle = handle_for(&config)?;
    let lambda = config.run.lambda.unwrap_or(resolvent_threshold(&handle) + 1.0);
    let part = if sin { Part::Imaginary } else { Part::Real };
    let f = TestFunction::cylindrical(freq.clone(), part);
    let x0 = config.x0();
    let value = resolvent_apply(&handle, lambda, &f, &x0, tol, panels)?;
    let out = serde_json::json!({
        "lambda": lambda,
        "x0": x0.as_slice(),
        "freq": freq,
        "part": if sin { "sin" } else { "cos" },
        "value": value.value,
        "stderr": value.stderr,
        "tail_bound": value.tail_bound,
        "horizon": value.horizon,
        "handle": handle.describe(),
        "seed": config.run.seed,
    });
    create_dir(&common.out)?;
    let text = serde_json::to_string_pretty(&out).context("serialising resolvent")? + "\n";
    fs::write(common.out.join("resolvent.json"), &text).context("writing resolvent.json")?;
    harness::write_manifest(&common.out)?;
    print!("{text}");
    Ok(true)
}

fn report_cmd(common: &Common, path: Option<PathBuf>) -> Result<bool, Failure> {
    let path = path.unwrap_or_else(|| common.out.join("report.json"));
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let report = VerificationReport::from_json(&text).map_err(|e| Failure::Config(e.into()))?;
    print_summary(&report);
    Ok(report.all_passed())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Failure::Config(anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    match cli.command {
        Command::Verify { suites, timings } => {
            if let Some(bad) = suites.iter().find(|s| Suite::from_name(s).is_none()) {
                return Err(Failure::Config(anyhow!(
                    "unknown suite `{bad}`; known: {}",
                    Suite::names().join(", ")
                )));
            }
            verify(&cli.common, suites, timings)
        }
        Command::Evolve { every } => evolve_cmd(&cli.common, every),
        Command::Resolvent { freq, sin, tol, panels } => resolvent_cmd(&cli.common, freq, sin, tol, panels),
        Command::Report { path } => report_cmd(&cli.common, path),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
