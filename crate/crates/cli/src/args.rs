use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dyhgn", version, about = "Dynamic heterogeneous graph models for risk detection on synthetic event logs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic event log and write it as CSV files.
    Generate(GenerateArgs),
    /// Build the unrolled graph of a dataset and report its size.
    BuildGraph(DataCommandArgs),
    /// Train a model variant over one or more seeds.
    Train(TrainArgs),
    /// Score a saved checkpoint on its validation and test splits.
    Evaluate(CheckpointArgs),
    /// Write graph-derived feature rows per target.
    Featurize(FeaturizeArgs),
    /// Fit the linear feature baseline and compare feature modes and splits.
    Baseline(BaselineArgs),
    /// Permutation importance of the graph-derived features.
    Importance(ImportanceArgs),
    /// Write the diachronic entity embeddings of a checkpoint.
    ExportEmbeddings(CheckpointArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON file with configuration values; flags take precedence.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory [default: runs/<timestamp>-<command>].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset: massreg, xfraud-txn or xfraud-account (optional `-synth` suffix).
    #[arg(long)]
    pub dataset: Option<String>,
    /// Dataset directory written by `generate`; synthetic data are drawn when absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Label schedule: uneven, even, imbalanced-txn or imbalanced-account.
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of target entities to generate.
    #[arg(long)]
    pub n_targets: Option<usize>,
    /// Seed for data generation, splits and models.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n_targets: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataCommandArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Model variant: gcn, gat, simple-hgn, dyhgn, dyhgn-de or dyhgn-de-hgt.
    #[arg(long)]
    pub variant: Option<String>,
    /// Number of model seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Split policy: chronological, random-trainval or random.
    #[arg(long)]
    pub split: Option<String>,
    /// Diachronic aggregation: lstm or mean.
    #[arg(long)]
    pub aggregation: Option<String>,
    /// Diachronic scoring: full or source-only.
    #[arg(long)]
    pub score_mode: Option<String>,
    /// Fraction of diachronic dimensions that are time-dependent.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Diachronic embedding size.
    #[arg(long)]
    pub de_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_hid: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint directory holding model.bin and model.json.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory [default: the `data` directory of the training run].
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Feature mode: global or incremental [default: both].
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Feature mode: global or incremental [default: both].
    #[arg(long)]
    pub mode: Option<String>,
    /// Split policy: chronological or random [default: both].
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ImportanceArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Feature mode: global or incremental.
    #[arg(long)]
    pub mode: Option<String>,
    /// Split policy: chronological or random.
    #[arg(long)]
    pub split: Option<String>,
    /// Shuffles per feature.
    #[arg(long)]
    pub repeats: Option<usize>,
}
