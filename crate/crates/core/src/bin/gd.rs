use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use guidedepth::cli::{self, parse_overrides, RunConfig};

/// Guided-upsampling monocular depth estimation.
///
/// Settings come from `--config <file>` (one `key = value` per line, `#`
/// comments) and are overridden by any `--key value` flags that follow.
#[derive(Parser)]
#[command(name = "gd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save checkpoints, loss history and a final evaluation.
    Train(Settings),
    /// Evaluate a checkpoint (or the ground-truth oracle with `--oracle true`).
    Eval(Settings),
    /// Predict metric depth for one image tensor file.
    Predict(Settings),
    /// Report parameters, MACs and inference latency.
    Bench(Settings),
    /// Train, evaluate and benchmark the five guidance variants.
    Ablate(Settings),
    /// Write synthetic RGB-D scenes to disk.
    Synth(Settings),
}

#[derive(clap::Args)]
struct Settings {
    /// `--config <file>` followed by `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
    args: Vec<String>,
}

fn config(settings: &Settings) -> Result<RunConfig> {
    let (file, overrides) = parse_overrides(&settings.args)?;
    RunConfig::load(file.as_deref(), &overrides).context("invalid configuration")
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(s) => {
            let cfg = config(s)?;
            let out = cli::run_train(&cfg)?;
            println!("trained {} steps; checkpoint at {}", out.history.steps.len(), out.checkpoint.display());
            print!("{}", out.report.to_key_values());
        }
        Command::Eval(s) => print!("{}", cli::run_eval(&config(s)?)?.to_key_values()),
        Command::Predict(s) => println!("wrote {}", cli::run_predict(&config(s)?)?.display()),
        Command::Bench(s) => {
            let r = cli::run_bench(&config(s)?)?;
            println!("{}", cli::BENCH_HEADER);
            println!("{}", r.to_csv_row());
        }
        Command::Ablate(s) => print!("{}", cli::format_ablation(&cli::run_ablate(&config(s)?)?)),
        Command::Synth(s) => println!("wrote {}", cli::run_synth(&config(s)?)?.display()),
    }
    Ok(())
}
