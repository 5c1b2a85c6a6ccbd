//! Command-line driver: `index`, `sample`, `decode` and `eval`.
//!
//! Every command is deterministic for a fixed seed under the scripted
//! backend; wall-clock timestamps go only to `run_metadata.json`.

pub mod config;
pub mod decode;
pub mod eval;
pub mod fixtures;
pub mod index;
pub mod jsonl;
pub mod run;
pub mod sample;
pub mod setup;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{ConfigArgs, EvalConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "chainrag",
    version,
    about = "Chain-of-retrieval QA: index, sample, decode, eval"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and save a BM25 index from a JSON-lines corpus
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Sample retrieval chains and emit training instances
    Sample(ConfigArgs),
    /// Decode a dataset with one or more strategies
    Decode(ConfigArgs),
    /// Summarize results files into summaries and a token/quality curve
    Eval(EvalArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    /// Results files, or directories holding results_*.jsonl
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    /// Defaults to the directory of the first input
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub n_resamples: Option<usize>,
    #[arg(long)]
    pub ci_level: Option<f64>,
}

impl EvalArgs {
    fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            let first = &self.results[0];
            if first.is_dir() {
                first.clone()
            } else {
                first.parent().map(PathBuf::from).unwrap_or_default()
            }
        })
    }

    fn eval_config(&self) -> EvalConfig {
        let d = EvalConfig::default();
        EvalConfig {
            n_resamples: self.n_resamples.unwrap_or(d.n_resamples),
            ci_level: self.ci_level.unwrap_or(d.ci_level),
        }
    }
}

/// Runs one command and returns the text to print.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Index {
            corpus,
            index,
            workers,
        } => {
            let n = index::cmd_index(corpus, index, *workers)?;
            Ok(format!("indexed {n} documents\n"))
        }
        Command::Sample(args) => {
            let config = RunConfig::resolve(args)?;
            Ok(sample::cmd_sample(&config)?.report())
        }
        Command::Decode(args) => {
            let config = RunConfig::resolve(args)?;
            Ok(decode::report(&decode::cmd_decode(&config)?))
        }
        Command::Eval(args) => {
            let out = eval::cmd_eval(
                &args.results,
                &args.output_dir(),
                &args.eval_config(),
                args.seed,
            )?;
            Ok(eval::report(&out))
        }
    }
}
