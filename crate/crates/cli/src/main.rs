use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use covtune_cli::commands::{self, Command};
use covtune_cli::config::{key_reference, RunConfig};
use covtune_cli::CliError;
use serde_json::json;
use sha2::{Digest, Sha256};

/// Iterative background-error covariance tuning experiments.
///
/// Exit codes: 0 success, 1 output error, 2 configuration error,
/// 3 numerical failure.
#[derive(Parser, Debug)]
#[command(name = "covtune", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (overrides `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed override: the Monte-Carlo seed, or the operator seed for gen-h.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Trial-count override for static / dynamic.
    #[arg(long, global = true, value_name = "N")]
    trials: Option<usize>,

    /// Worker threads for the Monte-Carlo trials (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Scalar naive / CUTE / PUB variance curves (scalar.csv).
    Scalar,
    /// Generate the observation operator (operator.csv).
    GenH,
    /// Static twin experiment (static_<method>.csv).
    Static,
    /// Cycled twin experiment with the shallow-water model (dynamic.csv).
    Dynamic,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Scalar => Command::Scalar,
            Cmd::GenH => Command::GenH,
            Cmd::Static => Command::Static,
            Cmd::Dynamic => Command::Dynamic,
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Cmd::GenH => cfg.operator.seed = seed,
            _ => cfg.seed = seed,
        }
    }
    if let Some(trials) = cli.trials {
        match cli.command {
            Cmd::Dynamic => cfg.dynamic.trials = trials,
            _ => cfg.static_twin.trials = trials,
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = resolve(cli)?;
    let resolved = cfg.to_toml();
    println!("# resolved configuration\n{resolved}");

    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out.display())))?;
    std::fs::write(cfg.out.join("config.toml"), &resolved).map_err(CliError::io)?;

    let command = Command::from(cli.command);
    let start = Instant::now();
    let results = commands::run(command, &cfg, &cfg.out)?;
    let runtime = start.elapsed().as_secs_f64();

    let summary = json!({
        "command": command.name(),
        "config_sha256": hex::encode(Sha256::digest(resolved.as_bytes())),
        "seed": cfg.seed,
        "runtime_seconds": runtime,
        "config": serde_json::to_value(&cfg).map_err(CliError::io)?,
        "results": results,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(CliError::io)?;
    std::fs::write(cfg.out.join("summary.json"), text + "\n").map_err(CliError::io)?;
    println!("{} finished in {runtime:.2} s; outputs in {}", command.name(), cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let reference = key_reference();
    let matches = Cli::command().after_long_help(reference.clone()).after_help(reference).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("covtune: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
