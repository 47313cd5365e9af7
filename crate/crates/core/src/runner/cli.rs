use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::config::{load_config, RunConfig};
use super::manifest::RunDir;
use super::pipeline::Pipeline;
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "EDITLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "editlab", version, about = "Knowledge-editing experiments on a nano transformer")]
pub struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed. Overrides EDITLAB_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for artifacts and the manifest.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic fact corpus and neutral text.
    GenCorpus,
    /// Pretrain the nano transformer on the corpus.
    Pretrain,
    /// Apply rank-one or multi-layer edits.
    Edit {
        #[command(subcommand)]
        method: EditMethod,
    },
    /// Learn the shared binary mask over edited weights.
    TrainMask,
    /// Reversal rates, perplexity, KL and signal statistics.
    Evaluate,
    /// Mechanistic analyses.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Heuristic pruning baselines.
    PruneSweep,
    /// Edit with the mask applied during value optimization.
    BlockEdit,
    /// Run every stage in order.
    Reproduce,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum EditMethod {
    Rome,
    Memit,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum AnalyzeKind {
    Decompose,
    Mask,
    Trajectories,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Pretrain => "pretrain",
            Command::Edit { method: EditMethod::Rome } => "edit rome",
            Command::Edit { method: EditMethod::Memit } => "edit memit",
            Command::TrainMask => "train-mask",
            Command::Evaluate => "evaluate",
            Command::Analyze { kind: AnalyzeKind::Decompose } => "analyze decompose",
            Command::Analyze { kind: AnalyzeKind::Mask } => "analyze mask",
            Command::Analyze { kind: AnalyzeKind::Trajectories } => "analyze trajectories",
            Command::PruneSweep => "prune-sweep",
            Command::BlockEdit => "block-edit",
            Command::Reproduce => "reproduce",
        }
    }
}

/// Resolves the effective configuration: file (or defaults), then the
/// environment seed, then `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| Error::Config {
            key: SEED_ENV.into(),
            message: format!("not an unsigned integer: {v:?}"),
        })?),
        Err(_) => None,
    };
    if let Some(seed) = cli.seed.or(env_seed) {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, cfg: RunConfig) -> Result<()> {
    let dir = RunDir::create(&cli.out)?;
    let mut p = Pipeline::new(cfg, dir, cli.quiet);
    match cli.command {
        Command::GenCorpus => drop(p.gen_corpus()?),
        Command::Pretrain => drop(p.pretrain()?),
        Command::Edit { method: EditMethod::Rome } => drop(p.edit_rome()?),
        Command::Edit { method: EditMethod::Memit } => drop(p.edit_memit()?),
        Command::TrainMask => drop(p.train_mask()?),
        Command::Evaluate => drop(p.evaluate()?),
        Command::Analyze { kind: AnalyzeKind::Decompose } => drop(p.analyze_decompose()?),
        Command::Analyze { kind: AnalyzeKind::Mask } => drop(p.analyze_mask()?),
        Command::Analyze { kind: AnalyzeKind::Trajectories } => drop(p.analyze_trajectories()?),
        Command::PruneSweep => drop(p.prune_sweep()?),
        Command::BlockEdit => drop(p.block_edit()?),
        Command::Reproduce => drop(p.reproduce()?),
    }
    let Pipeline { cfg, dir, .. } = p;
    dir.finish(cli.command.name(), &cfg)?;
    Ok(())
}

/// Parses arguments and runs one command. Returns the process exit code:
/// 0 on success (including `--help`), 1 on usage or configuration errors
/// (nothing is written), 2 on runtime failures.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match execute(&cli, cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
