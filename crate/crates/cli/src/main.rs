//! `npunas`: supernet, latency, search, scaling and post-processing from
//! the command line.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{Ctx, Provider, TargetArgs};
use crate::config::Config;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "npunas", version, about = "NPU-aware single-path architecture search")]
struct Cli {
    /// Experiment config (TOML); without it the `--preset` bundle is used
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config when no file is given: desk or default
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the config seed everywhere
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Supernet(SupernetCmd),
    #[command(subcommand)]
    Latency(LatencyCmd),
    #[command(subcommand)]
    Search(SearchCmd),
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Compound-scale an architecture under the [scale] budget
    Scale {
        arch: PathBuf,
        out: PathBuf,
        #[arg(long)]
        target_ms: Option<f64>,
    },
    #[command(subcommand)]
    Postprocess(PostprocessCmd),
    /// Extract and repair an architecture from a supernet checkpoint
    Export {
        checkpoint: PathBuf,
        out: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Aggregate run directories into an accuracy-vs-latency CSV
    Report {
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SupernetCmd {
    /// Write a config bundle for the chosen preset
    Init { out: PathBuf },
    /// Check the supernet, or an architecture file against it
    Validate { arch: Option<PathBuf> },
}

#[derive(Subcommand)]
enum LatencyCmd {
    /// Write the latency table CSV for the supernet
    Table {
        out: PathBuf,
        #[arg(long, value_enum, default_value = "analytical")]
        provider: Provider,
    },
    /// Estimate an architecture's latency
    Estimate {
        arch: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "analytical")]
        provider: Provider,
    },
    /// MAPE of the analytical model against the simulator
    ValidateModel {
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

#[derive(Subcommand)]
enum SearchCmd {
    /// Two-phase search; writes arch.toml, metrics.csv, summary.json
    Run {
        out_dir: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        target: TargetArgs,
        /// Train the result with [train] and write eval.json
        #[arg(long)]
        evaluate: bool,
    },
}

#[derive(Subcommand)]
enum BaselineCmd {
    /// Proxy-train latency-matched random architectures, keep the best
    RandomSearch {
        out_dir: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// One latency-matched random architecture
    RandomSelection {
        out_dir: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long)]
        evaluate: bool,
    },
}

#[derive(Subcommand)]
enum PostprocessCmd {
    /// Enable SE on every block and switch to h-swish
    AddSe { arch: PathBuf, out: PathBuf },
    /// Train (or load) the network and measure SE dispersion
    Dispersion {
        arch: PathBuf,
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        save_checkpoint: Option<PathBuf>,
    },
    /// Drop SE from the lowest-dispersion blocks
    RemoveSe { arch: PathBuf, report: PathBuf, out: PathBuf },
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::preset(&cli.preset)?,
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Supernet(SupernetCmd::Init { out }) = &cli.command {
        return commands::supernet_init(out, &cli.preset);
    }
    if let Command::Report { out, runs } = &cli.command {
        return commands::report(out, runs);
    }
    let ctx = Ctx::new(load_config(&cli)?)?;
    match cli.command {
        Command::Supernet(SupernetCmd::Validate { arch }) => commands::supernet_validate(&ctx, arch.as_deref()),
        Command::Supernet(SupernetCmd::Init { .. }) | Command::Report { .. } => unreachable!("handled above"),
        Command::Latency(LatencyCmd::Table { out, provider }) => commands::latency_table(&ctx, &out, provider),
        Command::Latency(LatencyCmd::Estimate { arch, table, provider }) => {
            commands::latency_estimate(&ctx, &arch, table.as_deref(), provider)
        }
        Command::Latency(LatencyCmd::ValidateModel { samples }) => commands::latency_validate_model(&ctx, samples),
        Command::Search(SearchCmd::Run { out_dir, table, target, evaluate }) => {
            commands::search_run(&ctx, &out_dir, table.as_deref(), target, evaluate)
        }
        Command::Baseline(BaselineCmd::RandomSearch { out_dir, table, target }) => {
            commands::baseline_random_search(&ctx, &out_dir, table.as_deref(), target)
        }
        Command::Baseline(BaselineCmd::RandomSelection { out_dir, table, target, evaluate }) => {
            commands::baseline_random_selection(&ctx, &out_dir, table.as_deref(), target, evaluate)
        }
        Command::Scale { arch, out, target_ms } => commands::scale(&ctx, &arch, &out, target_ms),
        Command::Postprocess(PostprocessCmd::AddSe { arch, out }) => commands::postprocess_add_se(&ctx, &arch, &out),
        Command::Postprocess(PostprocessCmd::Dispersion { arch, out, checkpoint, save_checkpoint }) => {
            commands::postprocess_dispersion(&ctx, &arch, &out, checkpoint.as_deref(), save_checkpoint.as_deref())
        }
        Command::Postprocess(PostprocessCmd::RemoveSe { arch, report, out }) => {
            commands::postprocess_remove_se(&ctx, &arch, &report, &out)
        }
        Command::Export { checkpoint, out, table, target } => {
            commands::export(&ctx, &checkpoint, &out, table.as_deref(), target)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::config(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or("")));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
