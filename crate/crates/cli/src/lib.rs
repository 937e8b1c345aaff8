//! Command-line front end: argument parsing, config merging, feasibility
//! resolution and the subcommand drivers.
//!
//! Exit codes are stable:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | other failure |
//! | 2 | validation or config parse error |
//! | 3 | infeasible exponents |
//! | 4 | numerical failure (range, convergence, divergence, sampler, failed run) |
//! | 5 | IO error |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fracspde::config::ExperimentConfig;
use fracspde::error::{Error, Result};
use fracspde::exponents::AssumptionProfile;
use fracspde::fields::assumption_audit;
use fracspde::lab::{run_monte_carlo, Experiment};
use fracspde::malliavin::{malliavin_matrices, MalliavinMatrices};
use fracspde::par::default_workers;
use fracspde::report::emit_report;
use fracspde::GalerkinVector;
use serde::Serialize;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "FRACSPDE_OUT";

#[derive(Debug, Parser)]
#[command(name = "fracspde", version, about = "Fractional-noise SPDE simulation and Malliavin diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set H=0.8` or `--set fields.coupling=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; falls back to the config `output_dir`.
    #[arg(long, env = OUT_ENV, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample the trace-class noise and write `noise.csv`.
    SampleFbm(SampleArg),
    /// Solve the mild equation and write `solution.csv`.
    Solve(SampleArg),
    /// Jacobian, inverse factor and right inverse; writes `flows.json`.
    Flows(SampleArg),
    /// Reduced and projected Malliavin matrices; writes `malliavin.json`.
    Malliavin(SampleArg),
    /// Bracket hierarchy ranks at the initial condition.
    Hormander,
    /// Monte Carlo density diagnostics; writes the report file set.
    Montecarlo,
    /// Advisory spot checks of the structural assumptions.
    Audit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Args)]
pub struct SampleArg {
    /// Sample index whose derived seed drives the noise.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
}

/// A parsed and merged command line.
#[derive(Debug, Clone)]
pub struct CliInvocation {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub workers: usize,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) => EXIT_VALIDATION,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::Range { .. }
        | Error::Convergence { .. }
        | Error::Divergence { .. }
        | Error::Sampler(_)
        | Error::Resource(_)
        | Error::RunFailed { .. } => EXIT_NUMERICAL,
        Error::Io { .. } => EXIT_IO,
    }
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

fn say(w: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(w, "{}", text.as_ref()).map_err(io_err("<stdout>"))
}

/// Merges the config file, `--set` overrides and `--seed`, then validates
/// and resolves the exponents.
pub fn parse_and_validate(cli: &Cli) -> Result<(CliInvocation, ExperimentConfig, AssumptionProfile)> {
    let c = &cli.common;
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            ExperimentConfig::from_toml_with_overrides(&text, &overrides)
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                    other => other,
                })?
        }
        None => ExperimentConfig::default_with_overrides(&overrides)?,
    };
    let profile = cfg.resolve()?;
    let inv = CliInvocation {
        command: cli.command,
        config_path: c.config.clone(),
        overrides: c.overrides.clone(),
        seed: c.seed,
        out: c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir)),
        workers: c.workers.unwrap_or_else(default_workers).max(1),
    };
    Ok((inv, cfg, profile))
}

fn write_text(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(io_err(&path))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_text(dir, name, &body)
}

fn csv_table(header: &str, times: &[f64], columns: &[Vec<f64>]) -> String {
    let mut s = format!("{header}\n");
    for (k, t) in times.iter().enumerate() {
        s.push_str(&t.to_string());
        for col in columns {
            s.push(',');
            s.push_str(&col[k].to_string());
        }
        s.push('\n');
    }
    s
}

fn numbered(prefix: &str, n: usize) -> String {
    (1..=n).map(|i| format!(",{prefix}_{i}")).collect()
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

#[derive(Serialize)]
struct MalliavinAt {
    t: f64,
    index: usize,
    matrices: MalliavinMatrices,
}

/// Echoes the resolved config and profile, then runs the subcommand.
pub fn execute(inv: &CliInvocation, cfg: &ExperimentConfig, profile: &AssumptionProfile, w: &mut dyn Write) -> Result<()> {
    say(w, "# resolved config")?;
    say(w, cfg.to_toml()?)?;
    say(w, profile.to_string())?;
    match inv.command {
        Command::SampleFbm(a) => sample_fbm(inv, cfg, a.sample, w),
        Command::Solve(a) => solve(inv, cfg, a.sample, w),
        Command::Flows(a) => flows(inv, cfg, a.sample, w),
        Command::Malliavin(a) => malliavin(inv, cfg, a.sample, w),
        Command::Hormander => hormander(cfg, w),
        Command::Montecarlo => montecarlo(inv, cfg, w),
        Command::Audit => audit(cfg, w),
    }
}

fn sample_fbm(inv: &CliInvocation, cfg: &ExperimentConfig, sample: usize, w: &mut dyn Write) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let noise = exp.noise(sample)?;
    let cols: Vec<Vec<f64>> = (0..noise.modes()).map(|i| noise.mode(i).to_vec()).collect();
    let header = format!("t{}", numbered("beta", noise.modes()));
    let path = write_text(&inv.out, "noise.csv", &csv_table(&header, noise.grid.points(), &cols))?;
    let ends: Vec<f64> = cols.iter().map(|c| c[c.len() - 1]).collect();
    say(w, format!("sample {sample} seed {}", exp.sample_seed(sample)))?;
    say(w, format!("beta(T) = {}", fmt_vec(&ends)))?;
    say(w, format!("wrote {}", path.display()))
}

fn solve(inv: &CliInvocation, cfg: &ExperimentConfig, sample: usize, w: &mut dyn Write) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let noise = exp.noise(sample)?;
    let sol = fracspde::spde::solve_mild(&exp.x0, &exp.fields, &exp.sg, &noise)?;
    let n = exp.sg.dim();
    let cols: Vec<Vec<f64>> = (0..n).map(|m| sol.states.iter().map(|x| x[m]).collect()).collect();
    let header = format!("t{}", numbered("x", n));
    let path = write_text(&inv.out, "solution.csv", &csv_table(&header, sol.grid.points(), &cols))?;
    let last = sol.last();
    say(w, format!("sample {sample} seed {}", exp.sample_seed(sample)))?;
    say(w, format!("X(T) = {}", fmt_vec(last.as_slice())))?;
    say(w, format!("|X(T)| = {:.6e}", last.norm()))?;
    say(w, format!("wrote {}", path.display()))
}

fn flows(inv: &CliInvocation, cfg: &ExperimentConfig, sample: usize, w: &mut dyn Write) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let (_, _, flows) = exp.trajectory(sample)?;
    let k = flows.last_index();
    say(w, format!("sample {sample}: right inverse up to t = {}", flows.grid.t(k)))?;
    say(w, format!("max |P_k R_k - Id| = {:.3e}", flows.product_defect()))?;
    say(w, format!("max |J_k - S(t_k) P_k| = {:.3e}", flows.flow_defect(&exp.sg)))?;
    say(w, format!("|J(T)| = {:.6e}", flows.jacobian[flows.grid.steps()].norm()))?;
    let path = write_json(&inv.out, "flows.json", &flows)?;
    say(w, format!("wrote {}", path.display()))
}

fn malliavin(inv: &CliInvocation, cfg: &ExperimentConfig, sample: usize, w: &mut dyn Write) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let (noise, sol, flows) = exp.trajectory(sample)?;
    let mut out = Vec::new();
    for &t in &exp.t_indices {
        let m = malliavin_matrices(&sol, &flows, &exp.fields, &exp.sg, &noise, t, exp.hurst, &exp.projection)?;
        say(w, format!("t = {}", sol.grid.t(t)))?;
        say(w, format!("  eig C_t     = {}", fmt_vec(&m.c_eigenvalues)))?;
        say(w, format!("  eig gamma_t = {}", fmt_vec(&m.gamma_eigenvalues)))?;
        say(w, format!("  det gamma_t = {:.6e}", m.gamma.determinant()))?;
        out.push(MalliavinAt {
            t: sol.grid.t(t),
            index: t,
            matrices: m,
        });
    }
    let path = write_json(&inv.out, "malliavin.json", &out)?;
    say(w, format!("wrote {}", path.display()))
}

fn hormander(cfg: &ExperimentConfig, w: &mut dyn Write) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let summary = exp.bracket_summary()?;
    say(w, "level  fields  rank  projected_rank  sigma_min")?;
    for l in &summary.levels {
        let smin = l.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        say(w, format!("{:>5}  {:>6}  {:>4}  {:>14}  {smin:.3e}", l.level, l.fields, l.rank, l.projected_rank))?;
    }
    say(w, format!("full rank: {}", summary.full_rank))?;
    say(w, format!("projected full rank: {}", summary.projected_full_rank))
}

fn montecarlo(inv: &CliInvocation, cfg: &ExperimentConfig, w: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let report = run_monte_carlo(cfg, inv.workers)?;
    let files = emit_report(&report, cfg, &inv.out, inv.workers, start.elapsed())?;
    say(w, format!("samples {}/{} completed, {} failed", report.samples_completed, report.samples_requested, report.failures.len()))?;
    for a in &report.aggregates {
        let median = a.lambda_min.as_ref().map(|q| format!("{:.3e}", q.median)).unwrap_or_else(|| "-".into());
        say(w, format!("t = {}: nondegenerate fraction {}, median lambda_min {median}", a.t, a.nondegenerate_fraction))?;
    }
    for r in &report.transport {
        say(w, format!("transport {} at t = {}: residual {:.3e}", r.field, r.time, r.residual))?;
    }
    say(w, format!("wrote {} and {}", files.report.display(), files.manifest.display()))
}

fn audit(cfg: &ExperimentConfig, w: &mut dyn Write) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let noise = exp.noise(0)?;
    let sol = fracspde::spde::solve_mild(&exp.x0, &exp.fields, &exp.sg, &noise)?;
    let steps = sol.grid.steps();
    let points: Vec<GalerkinVector> = (0..=4).map(|q| sol.at(q * steps / 4).clone()).collect();
    let report = assumption_audit(&exp.fields, &exp.profile, &points);
    for e in &report.entries {
        let measured = e.measured.map(|m| format!("{m:.3e}")).unwrap_or_else(|| "-".into());
        say(w, format!("{:<4} {:<12} {measured:>10}  {}", format!("{:?}", e.status).to_lowercase(), e.assumption, e.detail))?;
    }
    say(w, format!("audit {}", if report.all_pass() { "passed" } else { "has warnings (advisory)" }))
}

/// Parses `argv`, runs, prints errors to stderr and returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let result = parse_and_validate(&cli).and_then(|(inv, cfg, profile)| execute(&inv, &cfg, &profile, stdout));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
