//! `rgr`: generate graphs and embeddings, build and verify constructions,
//! train, sweep and analyze.
//!
//! Exit status: 0 success, 1 verification failure, 2 configuration or
//! input error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use commands::{Artifacts, Out, Status};

#[derive(Parser)]
#[command(name = "rgr", version, about = "Relational graph recognition capacity lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// single-threaded, fixed job order
    #[arg(long)]
    serial: bool,
    /// worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a graph from the [graph] section
    GenGraph(Common),
    /// Sample an embedding from the [embedding] section
    GenEmbed(Common),
    /// Build one construction from [construct] and check full separation
    Construct(Common),
    /// Monte-Carlo check of [construct], or check stored artifacts
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires_all = ["embedding", "graph"])]
        params: Option<PathBuf>,
        #[arg(long)]
        embedding: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// JSON array of context index lists
        #[arg(long, requires = "params")]
        contexts: Option<PathBuf>,
    },
    /// Train one model from the [train] section
    Train(Common),
    /// Run (or resume) the [sweep] grid into <out>/sweep.jsonl
    Sweep(Common),
    /// D_K*, h* and scaling fits from a sweep log
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        /// leave (d_model = 16, m > 64) points out of the fits
        #[arg(long)]
        exclude_outliers: bool,
    },
    /// Per-configuration CSV and a D_K* table from a sweep log
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Status> {
    let (name, common) = match &cli.command {
        Command::GenGraph(c) => ("gen-graph", c),
        Command::GenEmbed(c) => ("gen-embed", c),
        Command::Construct(c) => ("construct", c),
        Command::Verify { common, .. } => ("verify", common),
        Command::Train(c) => ("train", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Analyze { common, .. } => ("analyze", common),
        Command::Report { common, .. } => ("report", common),
    };
    let jobs = if common.serial { Some(1) } else { common.jobs };
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = config::load_opt(common.config.as_deref())?;
    let explicit_seed = common.seed.or(cfg.config.seed);
    let seed = explicit_seed.unwrap_or(0);
    let mut out = Out::new(&common.out, name, &cfg.hash, explicit_seed)?;

    let status = match &cli.command {
        Command::GenGraph(_) => commands::gen_graph(&cfg, seed, &mut out)?,
        Command::GenEmbed(_) => commands::gen_embed(&cfg, seed, &mut out)?,
        Command::Construct(_) => commands::construct(&cfg, seed, &mut out)?,
        Command::Verify { params, embedding, graph, contexts, .. } => {
            let artifacts = match (params, embedding, graph) {
                (Some(p), Some(e), Some(g)) => Some(Artifacts {
                    params: p.clone(),
                    embedding: e.clone(),
                    graph: g.clone(),
                    contexts: contexts.clone(),
                }),
                _ => None,
            };
            commands::verify(&cfg, seed, artifacts, &mut out)?
        }
        Command::Train(_) => commands::train(&cfg, seed, &mut out)?,
        Command::Sweep(c) => commands::sweep(&cfg, explicit_seed, c.serial, &mut out)?,
        Command::Analyze { log, exclude_outliers, .. } => commands::analyze_log(&cfg, log, *exclude_outliers, &mut out)?,
        Command::Report { log, .. } => commands::report(&cfg, log, &mut out)?,
    };
    out.finish()?;
    Ok(status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
