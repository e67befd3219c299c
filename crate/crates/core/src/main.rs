use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use headwise_kv::harness::{self, commands, ExperimentConfig};
use headwise_kv::{Parallelism, Result};

#[derive(Parser)]
#[command(name = "headwise", version, about = "Head-wise KV cache experiments on a toy attention stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile heads and write a role map.
    Profile(CommonArgs),
    /// Run a rollout under the configured strategy.
    Generate(CommonArgs),
    /// Frame-slot budget table.
    Budget(CommonArgs),
    /// Core stability of role assignments across profiling conditions.
    Stability(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute fidelity against the unbounded reference even for long runs.
    #[arg(long)]
    with_oracle: bool,
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Profile(args) | Command::Generate(args) | Command::Budget(args) | Command::Stability(args)) =
        &cli.command;
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let mode = Parallelism::default();
    match &cli.command {
        Command::Profile(_) => {
            let o = commands::cmd_profile(&cfg, &out, mode)?;
            eprintln!(
                "roles: {} anchor, {} local, {} memory",
                o.role_map.count(headwise_kv::HeadRole::Anchor),
                o.role_map.count(headwise_kv::HeadRole::Local),
                o.role_map.count(headwise_kv::HeadRole::Memory)
            );
        }
        Command::Generate(_) => {
            let o = commands::cmd_generate(&cfg, &out, args.with_oracle, mode)?;
            eprintln!("{} blocks, {} admission decisions", o.metrics.len(), o.admissions().len());
        }
        Command::Budget(_) => {
            for r in commands::cmd_budget(&cfg, &out)? {
                eprintln!("{:<16} {:>8} {:>7.1}%", r.method, r.frame_slots, r.relative_budget);
            }
        }
        Command::Stability(_) => {
            let o = commands::cmd_stability(&cfg, &out, mode)?;
            eprintln!("S_avg = {:.4}", o.report.s_avg);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(harness::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
