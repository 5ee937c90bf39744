//! `pathfbsde`: run verification experiments against the closed-form
//! oracle problems and persist the results as diffable flat files.
//!
//! Exit codes are machine-usable in CI: 0 all verdicts pass, 1 a check
//! failed, 2 usage or configuration error, 3 solver divergence.

mod checks;
mod config;
mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use pathfbsde_core::fbsde_problem::Verdict;
use pathfbsde_core::{registry, Error as CoreError};

use config::ExperimentConfig;
use output::{RunRecord, SweepRow, SweepSummary};

/// CLI failure with its exit-code class attached.
#[derive(Debug)]
pub enum CliError {
    /// Usage/configuration problems: exit 2.
    Config(String),
    /// The Picard iteration (or a forward path) diverged: exit 3.
    Divergence(String),
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn from_core(e: CoreError) -> Self {
        match e {
            CoreError::NoConvergence { .. } | CoreError::Diverged { .. } => {
                CliError::Divergence(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Divergence(m) => write!(f, "solver divergence: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pathfbsde",
    version,
    about = "Forward-backward SDE verification experiments"
)]
struct Cli {
    /// Override the solver seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress tables; print only the verdict summary.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the checks of a JSON experiment config.
    Run { config: PathBuf },
    /// List the built-in oracle problems.
    ListProblems,
    /// Run a config once per sweep point and tabulate the errors.
    Sweep { config: PathBuf },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
    let outcome = match &cli.command {
        Command::Run { config } => cmd_run(config, &cli),
        Command::ListProblems => cmd_list_problems(),
        Command::Sweep { config } => cmd_sweep(config, &cli),
    };
    match outcome {
        Ok(all_pass) => std::process::exit(if all_pass { 0 } else { 1 }),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

/// Honor PATHFBSDE_THREADS as a cap on the worker pool. The numerics are
/// thread-count invariant by construction; this only bounds CPU use.
fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("PATHFBSDE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("PATHFBSDE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))
}

fn load_config(path: &PathBuf, cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.solver.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn cmd_run(path: &PathBuf, cli: &Cli) -> Result<bool, CliError> {
    let cfg = load_config(path, cli)?;
    let started = Instant::now();
    let (records, all_pass) = execute(&cfg, cli.quiet)?;
    for rec in &records {
        output::write_check_csv(&cfg.output_dir, rec)?;
    }
    let record = build_record(&cfg, records, None, started.elapsed().as_secs_f64())?;
    persist(&cfg, &record)?;
    println!(
        "{}: {} ({} checks, record in {})",
        record.problem,
        if record.all_pass { "PASS" } else { "FAIL" },
        record.checks.len(),
        cfg.output_dir.display()
    );
    Ok(all_pass)
}

fn cmd_sweep(path: &PathBuf, cli: &Cli) -> Result<bool, CliError> {
    let cfg = load_config(path, cli)?;
    let started = Instant::now();
    let points = cfg.expand_sweep()?;
    let mut rows = Vec::with_capacity(points.len());
    let mut all_pass = true;
    for (assignment, point_cfg) in &points {
        if !cli.quiet {
            let label = assignment
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(", ");
            println!("== sweep point: {label}");
        }
        let problem = point_cfg.build_problem()?;
        let (gamma, x) = point_cfg.build_datum(&problem)?;
        let records = checks::run_checks(point_cfg, &problem, &gamma, &x)?;
        let point_pass = records.iter().all(|r| r.verdict == Verdict::Pass);
        all_pass &= point_pass;

        // The error row against the closed form, from the u_value check
        // if requested, otherwise from a dedicated evaluation.
        let (u_value, u_exact) = match records.iter().find(|r| r.check == "u_value") {
            Some(r) => (
                vec_field(&r.report, "value"),
                vec_field(&r.report, "exact"),
            ),
            None => {
                let est = pathfbsde_core::FunctionalEstimator::new(
                    problem.coeffs.clone(),
                    point_cfg.solver.clone(),
                )
                .map_err(CliError::from_core)?;
                let (v, _) = est.evaluate_u(&gamma, &x).map_err(CliError::from_core)?;
                let e = (problem.exact.u)(&gamma, &x);
                (v, e)
            }
        };
        let abs_error = u_value
            .iter()
            .zip(&u_exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        rows.push(SweepRow {
            assignment: assignment.clone(),
            u_value,
            u_exact,
            abs_error,
            all_pass: point_pass,
        });
    }
    let fitted_slope = sweep_slope(&cfg, &rows);
    let sweep = SweepSummary { rows, fitted_slope };
    if !cli.quiet {
        if let Some(s) = fitted_slope {
            println!("fitted log-log error slope: {s:.3}");
        }
    }
    let record = build_record(&cfg, Vec::new(), Some(sweep), started.elapsed().as_secs_f64())?;
    persist(&cfg, &record)?;
    println!(
        "sweep {}: {} ({} points, record in {})",
        record.problem,
        if all_pass { "PASS" } else { "FAIL" },
        record.sweep.as_ref().map_or(0, |s| s.rows.len()),
        cfg.output_dir.display()
    );
    Ok(all_pass)
}

fn cmd_list_problems() -> Result<bool, CliError> {
    let header: Vec<String> = ["id", "n", "d", "closed form"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = registry(1.0)
        .iter()
        .map(|p| {
            vec![
                p.id.to_string(),
                p.coeffs.n.to_string(),
                p.coeffs.d.to_string(),
                p.exact.formula.clone(),
            ]
        })
        .collect();
    println!("{}", output::render_table(&header, &rows));
    Ok(true)
}

fn execute(
    cfg: &ExperimentConfig,
    quiet: bool,
) -> Result<(Vec<checks::CheckRecord>, bool), CliError> {
    let problem = cfg.build_problem()?;
    let (gamma, x) = cfg.build_datum(&problem)?;
    let records = checks::run_checks(cfg, &problem, &gamma, &x)?;
    let mut all_pass = true;
    for rec in &records {
        all_pass &= rec.verdict == Verdict::Pass;
        if !quiet {
            let (header, rows) = &rec.table;
            println!("== {} [{:?}]", rec.check, rec.verdict);
            println!("{}", output::render_table(header, rows));
            println!();
        }
    }
    Ok((records, all_pass))
}

fn build_record(
    cfg: &ExperimentConfig,
    records: Vec<checks::CheckRecord>,
    sweep: Option<SweepSummary>,
    duration_seconds: f64,
) -> Result<RunRecord, CliError> {
    // The fingerprint identifies the experiment, not its destination:
    // two runs of one config into different directories must agree.
    let mut doc = serde_json::to_value(cfg)
        .map_err(|e| CliError::config(format!("config serialization: {e}")))?;
    doc.as_object_mut()
        .expect("config serializes to an object")
        .remove("output_dir");
    let canonical = serde_json::to_string(&doc)
        .map_err(|e| CliError::config(format!("config serialization: {e}")))?;
    let all_pass = records.iter().all(|r| r.verdict == Verdict::Pass)
        && sweep
            .as_ref()
            .map_or(true, |s| s.rows.iter().all(|r| r.all_pass));
    Ok(RunRecord {
        artifact_version: env!("CARGO_PKG_VERSION"),
        config_fingerprint: output::fingerprint(&canonical),
        problem: cfg.problem.id.clone(),
        all_pass,
        checks: records
            .into_iter()
            .map(|r| output::CheckSummary {
                check: r.check.clone(),
                verdict: r.verdict,
                report: r.report.clone(),
            })
            .collect(),
        sweep,
        duration_seconds,
    })
}

fn persist(cfg: &ExperimentConfig, record: &RunRecord) -> Result<(), CliError> {
    output::write_record(&cfg.output_dir, record)?;
    if let Some(sweep) = &record.sweep {
        output::write_sweep_csv(&cfg.output_dir, sweep)?;
    }
    Ok(())
}

/// Fit |u − exact| against a single numeric sweep axis, log-log. Only
/// meaningful for one axis of positive numbers (e.g. n_steps ladders).
fn sweep_slope(cfg: &ExperimentConfig, rows: &[SweepRow]) -> Option<f64> {
    let sweep = cfg.sweep.as_ref()?;
    if sweep.len() != 1 || rows.len() < 2 {
        return None;
    }
    let mut xs = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    for row in rows {
        let v = row.assignment.first()?.1.as_f64()?;
        if !(v > 0.0) || !(row.abs_error > 0.0) {
            return None;
        }
        xs.push(v);
        ys.push(row.abs_error);
    }
    Some(pathfbsde_core::stats::fit_loglog_slope(&xs, &ys))
}

fn vec_field(report: &serde_json::Value, key: &str) -> Vec<f64> {
    report
        .get(key)
        .and_then(|v| v.as_array())
        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
        .unwrap_or_default()
}
