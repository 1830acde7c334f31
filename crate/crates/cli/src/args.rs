use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mahaguard::experiment::OodSplit;
use mahaguard::scorers::{ScorerId, DEFAULT_KNN_K};
use mahaguard::trainer::TrainConfig;
use mahaguard::ShrinkageMode;

#[derive(Debug, Parser)]
#[command(name = "mahaguard", version, about = "Density-based out-of-distribution detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit class-conditional Gaussians to labeled embeddings.
    Fit(FitArgs),
    /// Score one embedding file with one scorer.
    Score(ScoreArgs),
    /// AUROC and FPR of one or more scorers on ID vs OOD inputs.
    Eval(EvalArgs),
    /// Train the toy network on a synthetic task and export its features.
    Train(TrainArgs),
    /// Train once per alpha and write a CSV of the headline metrics.
    Sweep(SweepArgs),
    /// Write the raw inputs of a synthetic task.
    GenTask(GenTaskArgs),
}

fn parse_shrinkage(s: &str) -> Result<ShrinkageMode, String> {
    s.parse().map_err(|e: mahaguard::Error| e.to_string())
}

fn parse_scorer(s: &str) -> Result<ScorerId, String> {
    s.trim().parse().map_err(|e: mahaguard::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<OodSplit, String> {
    s.parse().map_err(|e: mahaguard::Error| e.to_string())
}

/// How `.csv` feature files are read; binary files carry their own flag.
#[derive(Debug, Args)]
pub struct CsvArgs {
    /// CSV inputs carry an integer label in their last column.
    #[arg(long)]
    pub labels_included: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Labeled embeddings (`.emb`, or `.csv` with `--labels-included`).
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub csv: CsvArgs,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long, default_value = "auto", value_parser = parse_shrinkage)]
    pub shrinkage: ShrinkageMode,
    /// Destination of the statistics file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by every command that runs scorers.
#[derive(Debug, Args)]
pub struct ScorerArgs {
    /// Statistics file from `fit` or `train` (needed by md and rmd).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Reference embeddings for the knn scorer.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_KNN_K)]
    pub k: usize,
    /// Energy-score temperature.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Embeddings to score. Logit scorers read the companion `<stem>.logits.<ext>` file.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub csv: CsvArgs,
    /// Exactly one scorer name.
    #[arg(long, default_value = "rmd", value_delimiter = ',', value_parser = parse_scorer)]
    pub scorers: Vec<ScorerId>,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Fixed threshold; scores at or above it are labeled ID.
    #[arg(long, conflicts_with = "id")]
    pub threshold: Option<f64>,
    /// ID embeddings used to calibrate the threshold at `--target-tpr`.
    #[arg(long)]
    pub id: Option<PathBuf>,
    #[arg(long, default_value_t = mahaguard::metrics::DEFAULT_TARGET_TPR)]
    pub target_tpr: f64,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// ID embeddings, or an ID score CSV with `--score-files`.
    #[arg(long)]
    pub id: PathBuf,
    /// Comma-separated OOD inputs.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ood: Vec<PathBuf>,
    #[command(flatten)]
    pub csv: CsvArgs,
    /// Treat `--id` and `--ood` as score CSVs written by `score`.
    #[arg(long)]
    pub score_files: bool,
    /// Comma-separated scorer names; md,rmd by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_scorer)]
    pub scorers: Option<Vec<ScorerId>>,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[arg(long, default_value_t = mahaguard::metrics::DEFAULT_TARGET_TPR)]
    pub target_tpr: f64,
    /// Output JSON; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainingArgs {
    /// Seeds both the synthetic task and the training run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub ema_momentum: Option<f64>,
    #[arg(long, value_parser = parse_shrinkage)]
    pub shrinkage: Option<ShrinkageMode>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
}

impl TrainingArgs {
    pub fn config(&self, alpha: f64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            seed: self.seed,
            alpha,
            epochs: self.epochs.unwrap_or(d.epochs),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            ema_momentum: self.ema_momentum.unwrap_or(d.ema_momentum),
            shrinkage: self.shrinkage.unwrap_or(d.shrinkage),
            logit_scale: self.logit_scale.unwrap_or(d.logit_scale),
            ..d
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated alpha values.
    #[arg(long)]
    pub alphas: String,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// OOD split reported in the CSV.
    #[arg(long, default_value = "far", value_parser = parse_split)]
    pub ood_split: OodSplit,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTaskArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}
