use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sacforge::{run_experiment, ExperimentConfig, ExperimentKind, Regime};

/// Regenerates block and network curves as CSV files plus a summary.
#[derive(Debug, Parser)]
#[command(name = "sacforge", version)]
struct Args {
    /// proto-shape, dac, multiplier, relu, regression, temperature or invariance-report
    experiment: ExperimentKind,
    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to the config's out_dir, then SACFORGE_OUT,
    /// then ./sacforge-out
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's seed list by a single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's regimes (repeatable)
    #[arg(long, value_name = "wi|mi|si|rect")]
    regime: Vec<Regime>,
    /// Replaces the config's spline counts (repeatable)
    #[arg(long, value_name = "k")]
    splines: Vec<usize>,
    /// Exit nonzero when any invariant check fails
    #[arg(long)]
    check: bool,
}

fn out_dir(args: &Args, config: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os("SACFORGE_OUT").filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sacforge-out"))
}

fn run(args: &Args) -> sacforge::Result<bool> {
    let mut config = ExperimentConfig::load(&args.config).map_err(|e| match e {
        sacforge::SacError::Config { line, message } => sacforge::SacError::Config {
            line,
            message: format!("{}: {message}", args.config.display()),
        },
        e => e,
    })?;
    if let Some(seed) = args.seed {
        config.seeds = Some(vec![seed]);
    }
    if !args.regime.is_empty() {
        config.regimes = Some(args.regime.clone());
    }
    if !args.splines.is_empty() {
        config.spline_counts = Some(args.splines.clone());
    }
    let out = out_dir(args, &config);
    let config = config.resolve(args.experiment)?;
    let report = run_experiment(&config, &out)?;
    println!(
        "{}: {} files, summary {}",
        args.experiment,
        report.files.len(),
        report.summary_path.display()
    );
    for c in &report.checks {
        println!(
            "{} {} = {:.6} (limit {})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.limit
        );
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if !args.check => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("sacforge: invariant check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("sacforge: {e}");
            ExitCode::from(2)
        }
    }
}
