//! Command-line syntax.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "activemt", version, about = "Transformer translation with pool-based active learning")]
pub struct Cli {
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,

    /// TOML configuration file. Without it the run directory's
    /// config.toml snapshot is used, if present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override any configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Root seed of every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic parallel corpus and a matching small-scale config.
    MakeToy(MakeToyArgs),
    /// Clean the raw corpus and split it into train/dev/test, baseline and pool.
    Prepare(PrepareArgs),
    /// Learn source and target BPE on the baseline split.
    LearnBpe(LearnBpeArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Beam-search BLEU and perplexity on the test split.
    Test(TestArgs),
    /// Translate stdin to stdout, one sentence per line.
    Translate(TranslateArgs),
    /// Run the active-learning loop (resumes an existing journal).
    ActiveLearn(ActiveLearnArgs),
    /// Run the loop with the interactive oracle and serve the annotation API.
    ServeAnnotation(ActiveLearnArgs),
    /// Collect curves and the test table of several runs into CSV files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    /// Output directory for toy.src, toy.trg and toy.toml.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub dev_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub baseline_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LearnBpeArgs {
    #[arg(long)]
    pub source_merges: Option<usize>,
    #[arg(long)]
    pub target_merges: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DataArg {
    Baseline,
    Full,
}

impl DataArg {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train on the labeled baseline share or on the whole training split.
    #[arg(long, value_enum)]
    pub data: Option<DataArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Model to evaluate; defaults to the run's latest model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Column name in reports; inferred from the run when omitted.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ActiveLearnArgs {
    /// least_confidence, margin or random.
    #[arg(long)]
    pub strategy: Option<String>,
    /// simulated or interactive.
    #[arg(long)]
    pub oracle: Option<String>,
    /// Start from the data, BPE and best model of a trained run.
    #[arg(long)]
    pub baseline_run: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub query_size: Option<usize>,
    #[arg(long)]
    pub pool_sample_fraction: Option<f64>,
    /// Retrain from scratch on all labels each iteration instead of fine-tuning.
    #[arg(long)]
    pub retrain_full: bool,
    /// Address of the annotation service.
    #[arg(long)]
    pub bind: Option<String>,
    /// Give up waiting for annotators after this many seconds (0 waits forever).
    #[arg(long)]
    pub idle_timeout: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Where to write the CSV files.
    #[arg(long)]
    pub out: PathBuf,
    /// Run directories to compare.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}
