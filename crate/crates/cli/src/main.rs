use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowgrpo::commands;
use flowgrpo::config::RunConfig;
use flowgrpo::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "flowgrpo", version, about = "Flow-GRPO experiments on low-dimensional rectified flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML config; every key is optional and unknown keys are errors.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set grpo.beta=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base checkpoint (overrides `run.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Flow-matching pretraining on a synthetic dataset.
    Pretrain(Common),
    /// GRPO fine-tuning of a pretrained checkpoint.
    Grpo(Common),
    /// SFT, RWR or DPO fine-tuning under the same rollout harness.
    Baseline(Common),
    /// Marginal-equivalence, diversity and reward metrics for a checkpoint.
    Eval(Common),
    /// One GRPO run per value of `ablate.axis` and seed.
    Ablate(Common),
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.sets)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.set_str("output_dir", &out.to_string_lossy());
    }
    Ok(cfg)
}

fn configure_workers() -> CliResult<()> {
    let Ok(raw) = std::env::var("FLOWGRPO_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("FLOWGRPO_WORKERS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size worker pool: {e}")))
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    configure_workers()?;
    match cli.command {
        Command::Pretrain(c) => commands::cmd_pretrain(&load(&c)?),
        Command::Grpo(c) => commands::cmd_grpo(&load(&c)?, c.checkpoint.as_deref()).map(|r| r.dir),
        Command::Baseline(c) => commands::cmd_baseline(&load(&c)?, c.checkpoint.as_deref()).map(|r| r.dir),
        Command::Eval(c) => commands::cmd_eval(&load(&c)?, c.checkpoint.as_deref()).map(|r| r.0),
        Command::Ablate(c) => commands::cmd_ablate(&load(&c)?, c.checkpoint.as_deref()).map(|r| r.0),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("flowgrpo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
