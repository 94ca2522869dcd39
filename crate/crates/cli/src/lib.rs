//! Command-line surface: `stats`, `preprocess`, `train`, `eval` and `report`.
//!
//! Every command reads an optional TOML run config (`--config`) and applies
//! flag overrides on top. Errors are reported on stderr as one JSON object;
//! the exit code is 0 on success, 1 on runtime errors and 2 on usage or
//! configuration errors.

pub mod commands;
pub mod config;
pub mod error;
pub mod plots;

use std::io::Write;
use std::path::PathBuf;

use claimcheck_core::encoding::EncoderRegistry;
use clap::{Args, Parser, Subcommand};

use crate::commands::print_line;
use crate::config::{Overrides, RunConfig};
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "claimcheck",
    version,
    about = "Train and evaluate misinformation classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single corpus file (overrides the `[corpus]` paths).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// bert_lstm, bert_dense, albert, roberta or hybrid.
    #[arg(long)]
    pub variant: Option<String>,
    /// `pretrained` or `test`.
    #[arg(long)]
    pub encoder: Option<String>,
    /// Width of test-family encoders.
    #[arg(long)]
    pub hidden_width: Option<usize>,
    /// Model input length including special tokens.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus statistics, cleaning audit and distribution charts.
    Stats {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write the cleaned split and the cleaning audit.
    Preprocess {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fine-tune one architecture and write a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory; `<output_dir>/checkpoint` by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labeled test corpus used instead of the configured test split.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Comparison and per-class tables from evaluation reports.
    Report {
        /// TOML run configuration (only `output_dir` is used).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave out the published reference rows.
        #[arg(long)]
        no_references: bool,
        /// Report files written by `eval`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn overrides(common: &CommonArgs, model: Option<&ModelArgs>) -> Overrides {
    let mut o = Overrides {
        seed: common.seed,
        output_dir: common.out.clone(),
        corpus: common.corpus.clone(),
        ..Overrides::default()
    };
    if let Some(m) = model {
        o.variant = m.variant.clone();
        o.encoder = m.encoder.clone();
        o.hidden_width = m.hidden_width;
        o.max_len = m.max_len;
        o.epochs = m.epochs;
        o.batch_size = m.batch_size;
        o.learning_rate = m.learning_rate;
    }
    o
}

/// Runs one parsed command, writing its summary lines to `stdout`.
/// Pretrained encoders resolve through [`EncoderRegistry::from_env`], which
/// has no backbone adapters; use [`run_with_registry`] to supply them.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    run_with_registry(cli, &EncoderRegistry::from_env(), stdout)
}

/// [`run`] with encoders loaded through `registry`.
pub fn run_with_registry(
    cli: Cli,
    registry: &EncoderRegistry,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    match cli.command {
        Command::Stats { common } => {
            let config = RunConfig::load(common.config.as_deref(), &overrides(&common, None))?;
            let doc = commands::stats(&config)?;
            let real = doc
                .corpus
                .per_class_fraction
                .get(&0)
                .copied()
                .unwrap_or(0.0);
            print_line(
                stdout,
                &format!(
                    "{} posts, {:.2}% real, {:.2}% fake, {} distinct words; 98%/99% word-count quantiles {}/{}",
                    doc.corpus.total,
                    100.0 * real,
                    100.0 * (1.0 - real),
                    doc.corpus.distinct_words,
                    doc.word_counts.quantile_98,
                    doc.word_counts.quantile_99
                ),
            )
        }
        Command::Preprocess { common } => {
            let config = RunConfig::load(common.config.as_deref(), &overrides(&common, None))?;
            let audit = commands::preprocess(&config)?;
            print_line(
                stdout,
                &format!(
                    "cleaned {} posts: {} missing, {} empty after cleaning",
                    audit.total, audit.missing_raw, audit.empty_after_cleaning
                ),
            )
        }
        Command::Train { common, model } => {
            let config =
                RunConfig::load(common.config.as_deref(), &overrides(&common, Some(&model)))?;
            let outcome = commands::train(&config, registry)?;
            let best = &outcome.history.epochs[outcome.history.best_epoch];
            print_line(
                stdout,
                &format!(
                    "{}: best epoch {} (val loss {:.4}, val accuracy {:.4}); outputs in {}",
                    outcome.manifest.variant,
                    outcome.history.best_epoch,
                    best.val_loss,
                    best.val_accuracy,
                    config.output_dir.display()
                ),
            )
        }
        Command::Eval {
            common,
            checkpoint,
            test,
            batch_size,
        } => {
            let mut o = overrides(&common, None);
            o.batch_size = batch_size;
            let config = RunConfig::load(common.config.as_deref(), &o)?;
            let report = commands::eval(&config, registry, checkpoint.as_deref(), test.as_deref())?;
            print_line(stdout, &report.table1_line())
        }
        Command::Report {
            config,
            out,
            no_references,
            reports,
        } => {
            let o = Overrides {
                output_dir: out,
                ..Overrides::default()
            };
            let config = RunConfig::load(config.as_deref(), &o)?;
            let table = commands::report(&reports, &config.output_dir, !no_references)?;
            stdout
                .write_all(table.to_markdown().as_bytes())
                .map_err(|e| CliError::io("<stdout>", e))
        }
    }
}
