use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use stratmiss::em::{fit, FitConfig};
use stratmiss::io::{read_dataset, write_dataset, write_failures_csv, write_json, write_summary_csv, FitDocument};
use stratmiss::mc::{run_monte_carlo, McOptions, McSummary};
use stratmiss::sim::{generate, SimConfig};
use stratmiss::variance::{estimate_variance, VarianceOptions};
use stratmiss::{DatasetOptions, Error};

const EXIT_INPUT: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_LINALG: u8 = 4;
const EXIT_MC_FAILURES: u8 = 5;

#[derive(Parser)]
#[command(name = "stratmiss", version, about = "Stratified Cox regression with partially missing strata")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from a TOML configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the model to a CSV dataset and write a JSON document.
    Fit(FitArgs),
    /// Run a Monte Carlo study and write the summary CSV.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the failed replications (default: `<out>.failures.csv`).
        #[arg(long)]
        failures: Option<PathBuf>,
        /// Also write the full summary with provenance as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Times at which the baselines are summarized (comma separated).
        #[arg(long, value_delimiter = ',')]
        lambda_times: Option<Vec<f64>>,
        #[command(flatten)]
        tol: TolArgs,
    },
}

#[derive(Args)]
struct TolArgs {
    #[arg(long)]
    em_tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

impl TolArgs {
    fn apply(&self, cfg: &mut FitConfig) {
        if let Some(t) = self.em_tol {
            cfg.em_tol = t;
        }
        if let Some(m) = self.max_iters {
            cfg.max_em_iters = m;
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of strata (default: largest label in the data).
    #[arg(long)]
    strata: Option<usize>,
    /// Compute standard errors and the baseline variance table.
    #[arg(long)]
    variance: bool,
    /// Times for the baseline table (comma separated; default: event-time deciles).
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Break tied event times by tiny deterministic offsets.
    #[arg(long)]
    jitter_ties: bool,
    #[arg(long, default_value_t = 0)]
    jitter_seed: u64,
    /// End of follow-up (default: largest observed time).
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    tol: TolArgs,
}

/// A study file: the simulation settings plus an optional `[fit]` table.
#[derive(Serialize, Deserialize)]
struct StudyFile {
    #[serde(flatten)]
    sim: SimConfig,
    #[serde(default)]
    fit: Option<FitConfig>,
}

#[derive(Serialize, Deserialize)]
struct McDocument {
    tool_version: String,
    sim: SimConfig,
    fit: FitConfig,
    options: McOptions,
    summary: McSummary,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Singular { .. } | Error::TooLarge { .. } => EXIT_LINALG,
        Error::TooManyFailures(..) => EXIT_MC_FAILURES,
        Error::ZeroDensity { .. } => EXIT_NOT_CONVERGED,
        _ => EXIT_INPUT,
    }
}

fn read_study(path: &Path) -> Result<StudyFile, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: format!("cannot read: {e}"),
    })?;
    Ok(toml::from_str(&text)?)
}

fn deciles(times: &[f64], tau: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = (1..10)
        .map(|d| times[((times.len() - 1) as f64 * d as f64 / 10.0).round() as usize])
        .filter(|&t| t > 0.0 && t < tau)
        .collect();
    grid.dedup();
    grid
}

fn fmt_se(se: Option<f64>) -> String {
    se.map_or("NA".into(), |s| format!("{s:.4}"))
}

fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<u8, Error> {
    let mut study = read_study(config)?;
    if let Some(s) = seed {
        study.sim.seed = s;
    }
    let data = generate(&study.sim)?;
    write_dataset(out, &data)?;
    println!(
        "n = {}, K = {}, event rate = {:.3}, missing rate = {:.3}",
        data.n(),
        data.k_strata(),
        data.event_fraction(),
        data.missing_fraction()
    );
    Ok(0)
}

fn cmd_fit(args: &FitArgs) -> Result<u8, Error> {
    let options = DatasetOptions {
        jitter_ties: args.jitter_ties,
        jitter_seed: args.jitter_seed,
        tau: args.tau,
    };
    let data = read_dataset(&args.data, args.strata, &options)?;
    let mut cfg = FitConfig::default();
    args.tol.apply(&mut cfg);
    let result = fit(&data, &cfg)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }

    let variance = if args.variance {
        let grid = match &args.lambda_grid {
            Some(g) => g.clone(),
            None => deciles(&data.event_times(), data.tau()),
        };
        let v = estimate_variance(&result.theta_hat, &data, &VarianceOptions::default())?;
        for w in &v.warnings {
            log::warn!("{w}");
        }
        Some((v, grid))
    } else {
        None
    };
    let doc = FitDocument::new(
        &args.data.display().to_string(),
        &data,
        &cfg,
        &options,
        &result,
        variance.as_ref().map(|(v, g)| (v, g.as_slice())),
    )?;
    write_json(&args.out, &doc)?;

    println!("{:<12} {:>12} {:>10}", "param", "estimate", "se");
    for e in &doc.estimates {
        println!("{:<12} {:>12.6} {:>10}", e.param, e.estimate, fmt_se(e.se));
    }
    if let Some(v) = &doc.variance {
        println!("\n{:<8} {:>10} {:>12} {:>10}", "stratum", "time", "cumulative", "se");
        for r in &v.lambda {
            println!("{:<8} {:>10.4} {:>12.6} {:>10}", r.stratum, r.time, r.cumulative, fmt_se(r.se));
        }
    }
    println!(
        "\nlog-likelihood {:.6} after {} EM iterations; max |score| {:.2e}",
        doc.loglik,
        doc.em_iterations,
        result.max_score_residual()
    );
    if result.converged {
        Ok(0)
    } else {
        eprintln!("error: EM did not converge; the result was written but is flagged");
        Ok(EXIT_NOT_CONVERGED)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_mc(
    config: &Path,
    reps: usize,
    out: &Path,
    failures: Option<&Path>,
    json: Option<&Path>,
    workers: Option<usize>,
    seed: Option<u64>,
    lambda_times: Option<Vec<f64>>,
    tol: &TolArgs,
) -> Result<u8, Error> {
    let study = read_study(config)?;
    let mut sim = study.sim;
    if let Some(s) = seed {
        sim.seed = s;
    }
    let mut fit_cfg = study.fit.unwrap_or_default();
    tol.apply(&mut fit_cfg);
    let mut options = McOptions::new(reps);
    options.workers = workers;
    options.lambda_times = lambda_times;

    let summary = run_monte_carlo(&sim, &fit_cfg, &options)?;
    write_summary_csv(out, &summary)?;
    let failures_path = failures.map_or_else(
        || {
            let mut p = out.as_os_str().to_owned();
            p.push(".failures.csv");
            PathBuf::from(p)
        },
        Path::to_path_buf,
    );
    write_failures_csv(&failures_path, &summary.failures)?;
    if let Some(path) = json {
        let doc = McDocument {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            sim,
            fit: fit_cfg,
            options,
            summary: summary.clone(),
        };
        write_json(path, &doc)?;
    }
    print!("{}", summary.table());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let outcome = match &cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(config, out, *seed),
        Command::Fit(args) => cmd_fit(args),
        Command::Mc {
            config,
            reps,
            out,
            failures,
            json,
            workers,
            seed,
            lambda_times,
            tol,
        } => cmd_mc(
            config,
            *reps,
            out,
            failures.as_deref(),
            json.as_deref(),
            *workers,
            *seed,
            lambda_times.clone(),
            tol,
        ),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
