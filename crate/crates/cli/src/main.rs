//! Pipeline runner: generate -> pretrain -> unlearn -> analyze -> attack
//! -> report, driven by a versioned TOML config.
//!
//! `UNLAB_THREADS` caps the worker thread count.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use unlab_core::pipeline::{render_report, run_stages, PipelineConfig, Stage, ALL_STAGES};

#[derive(Parser)]
#[command(name = "unlab", version, about = "Unlearning robustness laboratory")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's output directory.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(short, long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fact corpus and the benign corpus.
    Generate,
    /// Train the base model until the corpus is memorized.
    Pretrain,
    /// Run every configured unlearning method and seed.
    Unlearn,
    /// Attribution analyses: influence variations, curves, grids, lens.
    Analyze,
    /// Harmful and benign retraining attacks.
    Attack,
    /// Collate the summary table and plot data.
    Report {
        /// Summarize an existing run directory instead of running the
        /// report stage of a config.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// All stages in dependency order, resuming where possible.
    All,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config <file.toml> is required for this command")?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    if let Ok(threads) = std::env::var("UNLAB_THREADS") {
        let n: usize = threads.parse().context("UNLAB_THREADS must be an integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }

    let cli = Cli::parse();
    let stages: Vec<Stage> = match &cli.command {
        Command::Generate => vec![Stage::Generate],
        Command::Pretrain => vec![Stage::Pretrain],
        Command::Unlearn => vec![Stage::Unlearn],
        Command::Analyze => vec![Stage::Analyze],
        Command::Attack => vec![Stage::Attack],
        Command::Report { dir } => {
            if let Some(dir) = dir {
                match render_report(dir) {
                    Ok(table) => {
                        println!("{table}");
                        return Ok(());
                    }
                    Err(e) => bail!("{e}"),
                }
            }
            vec![Stage::Report]
        }
        Command::All => ALL_STAGES.to_vec(),
    };

    let cfg = load_config(&cli)?;
    run_stages(&cfg, &stages)?;
    for stage in &stages {
        println!("stage {stage}: ok");
    }
    if stages.contains(&Stage::Report) {
        let table = render_report(&cfg.out_dir)?;
        println!("\n{table}");
    }
    println!("artifacts under {}", cfg.out_dir.display());
    Ok(())
}
