//! Command-line front end.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::*;
pub use config::RunConfig;

use crate::attribution::AttributionMethod;
use crate::error::Result;
use crate::semantics::Side;

#[derive(Debug, Parser)]
#[command(name = "neuropatch", version, about = "Neuron-level repair of a toy code language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// key = value file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Working directory for inputs and outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Args, Default)]
pub struct RepairArgs {
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub quota: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub parallel_k: Option<usize>,
    /// fresh | accumulate
    #[arg(long)]
    pub isolation: Option<String>,
    /// same-type | all
    #[arg(long)]
    pub spec_scope: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SideArg {
    Input,
    Output,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttrArg {
    Ixg,
    Actv,
    Rand,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training corpus, held-out split and benchmark.
    GenCorpus {
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the reference model on the corpus.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Scan held-out pairs and the benchmark for mispredictions.
    FindFailures {
        #[arg(long)]
        max_pairs: Option<usize>,
    },
    /// Repair every failing position of the held-out pairs.
    Repair(RepairArgs),
    /// Repair benchmark samples one at a time and probe the side effects.
    Probe {
        #[command(flatten)]
        repair: RepairArgs,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Join result logs into report.csv and summary.md.
    Report,
    /// Run every stage end to end.
    Pipeline {
        #[command(flatten)]
        repair: RepairArgs,
    },
    /// Write a semantic-bases CSV.
    DumpBases {
        #[arg(long, value_enum, default_value = "output")]
        side: SideArg,
    },
    /// Score every neuron for one prompt.
    Attribute {
        /// Space-separated prompt tokens.
        #[arg(long)]
        prompt: String,
        /// Token to attribute; defaults to the current prediction.
        #[arg(long)]
        wrt: Option<String>,
        #[arg(long, value_enum, default_value = "ixg")]
        method: AttrArg,
        #[arg(long)]
        dump_attribution: Option<PathBuf>,
    },
}

fn apply_repair_args(cfg: &mut RunConfig, a: &RepairArgs) -> Result<()> {
    let pairs = [
        ("method", &a.method),
        ("variant", &a.variant),
        ("isolation", &a.isolation),
        ("spec_scope", &a.spec_scope),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    if let Some(q) = a.quota {
        cfg.quota = q;
    }
    if let Some(c) = a.candidates {
        cfg.candidates = c;
    }
    if let Some(k) = a.parallel_k {
        cfg.parallel_k = k;
    }
    Ok(())
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::GenCorpus { size: Some(n) } => cfg.corpus_size = *n,
        Command::Train { steps: Some(n) } => cfg.train_steps = *n,
        Command::FindFailures { max_pairs: Some(n) } => cfg.max_pairs = *n,
        Command::Repair(a) | Command::Pipeline { repair: a } => apply_repair_args(&mut cfg, a)?,
        Command::Probe { repair, limit } => {
            apply_repair_args(&mut cfg, repair)?;
            if limit.is_some() {
                cfg.probe_limit = *limit;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let force = cli.common.force;
    match &cli.command {
        Command::GenCorpus { .. } => cmd_gen_corpus(&cfg, force),
        Command::Train { .. } => cmd_train(&cfg, force),
        Command::FindFailures { .. } => cmd_find_failures(&cfg, force),
        Command::Repair(_) => cmd_repair(&cfg, force),
        Command::Probe { .. } => cmd_probe(&cfg, force),
        Command::Report => cmd_report(&cfg, force),
        Command::Pipeline { .. } => cmd_pipeline(&cfg, force),
        Command::DumpBases { side } => {
            let side = match side {
                SideArg::Input => Side::Input,
                SideArg::Output => Side::Output,
            };
            cmd_dump_bases(&cfg, side, force)
        }
        Command::Attribute {
            prompt,
            wrt,
            method,
            dump_attribution,
        } => {
            let method = match method {
                AttrArg::Ixg => AttributionMethod::Ixg,
                AttrArg::Actv => AttributionMethod::Actv,
                AttrArg::Rand => AttributionMethod::Rand,
            };
            cmd_attribute(&cfg, prompt, wrt.as_deref(), method, dump_attribution.as_deref(), force)
        }
    }
}
