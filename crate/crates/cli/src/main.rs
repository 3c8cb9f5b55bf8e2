mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use geossl_core::harness::{Axis, Protocol};

use crate::commands::Ctx;
use crate::config::{Config, FlagOverrides};

/// Geography-aware contrastive pre-training on synthetic remote-sensing
/// patches.
#[derive(Debug, Parser)]
#[command(name = "geossl", version)]
struct Cli {
    /// TOML config file with [dataset], [loss], [train], [eval] and
    /// [ablation] sections.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Seed for both dataset generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory: the dataset for `generate`, the parent of run
    /// directories otherwise (default `runs`), the chart directory for
    /// `report` (default `report`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for ablations; 0 uses all cores.
    #[arg(long, global = true, env = "GEOSSL_THREADS", value_name = "INT")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate,
    /// Pre-train an encoder and evaluate it.
    Pretrain {
        /// Dataset directory (default: dataset.path).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or a freshly initialized encoder.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Protocols to run; comma separated or repeated.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
        protocol: Vec<ProtocolArg>,
        /// Write embeddings of every record as raw f32 plus a JSON sidecar.
        #[arg(long, value_name = "PATH")]
        export: Option<PathBuf>,
    },
    /// Sweep one axis over several seeds and write a CSV.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_axis)]
        axis: Option<Axis>,
        /// Comma separated grid points (default: the axis's grid).
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Plot and tabulate ablation or run CSVs.
    Report {
        #[arg(required = true, value_name = "CSV")]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Knn,
    Linear,
    Spearman,
    All,
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    Axis::ALL
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = Axis::ALL.iter().map(|a| a.name()).collect();
            format!("unknown axis `{s}` (expected one of {})", names.join(", "))
        })
}

fn protocols(args: &[ProtocolArg]) -> Vec<Protocol> {
    let mut out: Vec<Protocol> = Vec::new();
    for a in args {
        let add: &[Protocol] = match a {
            ProtocolArg::Knn => &[Protocol::Knn],
            ProtocolArg::Linear => &[Protocol::Linear],
            ProtocolArg::Spearman => &[Protocol::Spearman],
            ProtocolArg::All => &Protocol::ALL,
        };
        for p in add {
            if !out.contains(p) {
                out.push(*p);
            }
        }
    }
    out
}

fn command() -> clap::Command {
    let keys = config::key_listing();
    let mut cmd = Cli::command().after_help(keys.clone());
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    for name in names {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(name, move |s| s.after_help(keys));
    }
    cmd
}

fn main() -> ExitCode {
    let cli = match Cli::from_arg_matches(&command().get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = Config::load(
        cli.config.as_deref(),
        &cli.set,
        &FlagOverrides { seed: cli.seed },
    )?;
    let ctx = Ctx {
        config,
        out: cli.out,
        force: cli.force,
        threads: cli.threads.unwrap_or(0),
    };
    match &cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Pretrain { data } => commands::pretrain(&ctx, data.as_deref()),
        Command::Evaluate {
            data,
            checkpoint,
            protocol,
            export,
        } => {
            let p = protocols(protocol);
            if p.is_empty() {
                bail!("no protocol selected");
            }
            commands::evaluate(
                &ctx,
                data.as_deref(),
                checkpoint.as_deref(),
                &p,
                export.as_deref(),
            )
        }
        Command::Ablate {
            data,
            axis,
            grid,
            seeds,
        } => commands::ablate(&ctx, data.as_deref(), *axis, grid, *seeds),
        Command::Report { inputs } => commands::report(&ctx, inputs),
    }
}
