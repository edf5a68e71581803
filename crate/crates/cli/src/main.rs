//! Experiment runner for the universal adaptive control toolkit.
//!
//! Subcommands: `run ex1` (regulation Monte Carlo), `run ex2` (tracking
//! comparison), `validate` (certificate grid checks), `fit-metric`
//! (polynomial dual-metric synthesis).
//!
//! Exit codes: 0 success, 1 usage/config error, 2 validation failure,
//! 3 i/o error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uac_core::experiment::{
    resolve_ex1, resolve_ex2, run_fit_metric, run_monte_carlo_ex1, run_tracking_ex2,
    validate_certificate, write_config_snapshot, ExperimentConfig, FitConfig, ValidateConfig,
};
use uac_core::Error;

#[derive(Parser)]
#[command(
    name = "uac",
    about = "Adaptive control experiments with rate-scaled estimation for unmatched uncertainty",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment preset.
    Run(RunArgs),
    /// Check a certificate on a sampled grid and report the worst point.
    Validate(ValidateArgs),
    /// Fit polynomial dual-metric coefficients over a sample grid.
    FitMetric(FitArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment preset: `ex1` (regulation batch) or `ex2` (tracking).
    experiment: String,
    /// JSON config file; fields override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the batch seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the trial count (ex1).
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory for CSV and summary files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Also run the fixed-estimate baseline arm on identical draws (ex1).
    #[arg(long)]
    no_adaptation: bool,
    /// Run only the static-reference arm (ex2).
    #[arg(long)]
    static_reference: bool,
    /// Metric artifact file (ex2; defaults to the shipped artifact).
    #[arg(long)]
    metric: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Built-in grid: `ex1-uclf` or `ex2-uccm`.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON validation config (certificate, grids, tolerance).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metric artifact to check instead of the shipped one.
    #[arg(long)]
    metric: Option<PathBuf>,
    /// Write the JSON report here in addition to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// JSON fit config; defaults to the `ex2` template preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the fitted metric artifact.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 3,
        Error::Validation(_) => 2,
        _ => 1,
    }
}

fn load_experiment_config(preset: &str, args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path)?;
            if c.preset.is_none() {
                c.preset = Some(preset.to_string());
            }
            c.with_preset_defaults()?
        }
        None => ExperimentConfig::preset(preset)?,
    };
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(trials) = args.trials {
        cfg.trials = Some(trials);
    }
    if let Some(workers) = args.workers {
        cfg.workers = Some(workers);
    }
    if let Some(metric) = &args.metric {
        cfg.metric_file = Some(metric.to_string_lossy().into_owned());
    }
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    match args.experiment.as_str() {
        "ex1" => {
            let cfg = load_experiment_config("ex1", &args)?;
            let setup = resolve_ex1(&cfg)?;
            if let Some(dir) = &args.out {
                write_config_snapshot(dir, &cfg)?;
            }
            let outcome = run_monte_carlo_ex1(&setup, args.no_adaptation, args.out.as_deref())?;
            let s = &outcome.adaptive;
            println!(
                "ex1 adaptive arm: {}/{} converged ({} diverged), median final |x| = {:.3e}, {:.1}s",
                s.converged, s.trials, s.diverged, s.final_norm_percentiles.p50, s.wall_seconds
            );
            if let Some(b) = &outcome.baseline {
                println!(
                    "ex1 baseline arm (no adaptation): {}/{} converged ({} diverged)",
                    b.converged, b.trials, b.diverged
                );
            }
            Ok(())
        }
        "ex2" => {
            let cfg = load_experiment_config("ex2", &args)?;
            let setup = resolve_ex2(&cfg)?;
            if let Some(dir) = &args.out {
                write_config_snapshot(dir, &cfg)?;
            }
            let outcome = run_tracking_ex2(&setup, args.static_reference, args.out.as_deref())?;
            if let Some(a) = &outcome.summary.adaptive {
                println!(
                    "ex2 adaptive reference: time-averaged energy {:.4e} over [{}, {}] s",
                    a.time_avg_energy, a.window_start, setup.sim.t_final
                );
            }
            if let Some(s) = &outcome.summary.static_reference {
                println!(
                    "ex2 static reference:   time-averaged energy {:.4e} over [{}, {}] s",
                    s.time_avg_energy, s.window_start, setup.sim.t_final
                );
            }
            if let Some(r) = outcome.summary.energy_ratio {
                println!("ex2 energy ratio (adaptive / static): {r:.4}");
            }
            Ok(())
        }
        other => Err(Error::Config(format!(
            "unknown experiment '{other}' (expected 'ex1' or 'ex2')"
        ))),
    }
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Error> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => ValidateConfig::preset(name)?,
        (None, Some(path)) => ValidateConfig::load(path)?,
        (None, None) => ValidateConfig::preset("ex2-uccm")?,
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(metric) = &args.metric {
        cfg.metric_file = Some(metric.to_string_lossy().into_owned());
    }
    let report = validate_certificate(&cfg)?;
    let json = serde_json::to_string_pretty(&report).unwrap();
    println!("{json}");
    if let Some(path) = &args.out {
        std::fs::write(path, &json).map_err(Error::Io)?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "worst {} = {:.4e} at x = {:?}, theta = {:?}",
            report.worst_kind, report.worst_value, report.worst_x, report.worst_theta
        )))
    }
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let cfg = match &args.config {
        Some(path) => FitConfig::load(path)?,
        None => FitConfig::preset_ex2(),
    };
    let artifact = run_fit_metric(&cfg)?;
    std::fs::write(&args.out, artifact.to_text()).map_err(Error::Io)?;
    println!(
        "fitted dual metric ({} coefficients) written to {}",
        artifact.poly.coeff_count(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate(args) => cmd_validate(args),
        Command::FitMetric(args) => cmd_fit(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
