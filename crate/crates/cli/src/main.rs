use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use smp_cli::{list_experiments, run, Check, RawConfig, Registry, EXIT_ERROR};

/// Solve and verify discounted infinite-horizon control problems.
#[derive(Parser)]
#[command(name = "smp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and its checks.
    Run(RunArgs),
    /// List registered experiments.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment ID (see `smp list`).
    #[arg(long)]
    experiment: Option<String>,
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `consumption.beta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Check to run (repeatable); all applicable checks when omitted.
    #[arg(long = "check", value_name = "NAME")]
    check: Vec<Check>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of simulated paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Truncation horizon; defaults to ln(1e4)/beta.
    #[arg(long)]
    horizon: Option<f64>,
}

fn load(args: &RunArgs) -> Result<RawConfig> {
    let mut raw = match &args.config {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::new(),
    };
    for s in &args.set {
        raw.assign(s)?;
    }
    if let Some(e) = &args.experiment {
        raw.set("experiment", e.clone().into())?;
    }
    if let Some(o) = &args.out {
        raw.set("out", o.display().to_string().into())?;
    }
    if let Some(v) = args.seed {
        let v = i64::try_from(v).map_err(|_| anyhow::anyhow!("--seed must be below 2^63"))?;
        raw.set("seed", v.into())?;
    }
    if let Some(v) = args.paths {
        raw.set("paths", (v as i64).into())?;
    }
    if let Some(v) = args.steps {
        raw.set("steps", (v as i64).into())?;
    }
    if let Some(v) = args.horizon {
        raw.set("horizon", v.into())?;
    }
    if !args.check.is_empty() {
        let names: Vec<toml::Value> = args.check.iter().map(|c| c.name().into()).collect();
        raw.set("checks", names.into())?;
    }
    Ok(raw)
}

fn execute(args: &RunArgs, registry: &Registry) -> Result<i32> {
    let config = load(args)?.resolve(&registry.sections())?;
    let results = run(registry, &config)?;
    print!("{}", results.table());
    println!("results written to {}", config.out.join("results.json").display());
    Ok(results.exit_code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let registry = Registry::builtin();
    let code = match cli.command {
        Command::List => {
            print!("{}", list_experiments(&registry));
            0
        }
        Command::Run(args) => execute(&args, &registry).unwrap_or_else(|e| {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }),
    };
    ExitCode::from(code as u8)
}
