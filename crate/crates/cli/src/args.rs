use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rankforge_core::{LossKind, Split};

#[derive(Debug, Parser)]
#[command(
    name = "rankforge",
    version,
    about = "Listwise ranking experiments for image-text retrieval"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train a bi-encoder and write a checkpoint plus the per-epoch trace.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Approximation error (and optionally retrieval quality) across temperatures.
    Tausweep(TausweepArgs),
    /// Dataset, three trainings, evaluation and an ablation table in one run.
    Repro(ReproArgs),
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: rankforge_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: rankforge_core::Error| e.to_string())
}

/// Comma-separated temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct TauList(pub Vec<f64>);

fn parse_taus(s: &str) -> Result<TauList, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad tau {t:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(TauList)
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub captions_per_image: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim_img: Option<usize>,
    #[arg(long)]
    pub feature_dim_txt: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub cluster_spread: Option<f64>,
    #[arg(long)]
    pub embed_noise_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Optimisation flags shared by every command that trains.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, value_parser = parse_loss, default_value = "joint")]
    pub loss: LossKind,
    #[arg(long, default_value_t = rankforge_core::losses::DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Epoch from which the learning rate is divided by 10.
    #[arg(long)]
    pub lr_decay_epoch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub joint_dim: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = rankforge_core::losses::DEFAULT_TAU)]
    pub tau: f64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    /// Defaults to the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Fixes the batch size of the similarity-level suite.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub min_n: usize,
    #[arg(long, default_value_t = 16)]
    pub max_n: usize,
    /// Single temperature; overrides `--taus`.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse_taus, default_value = "1e-1,1e-2,1e-3")]
    pub taus: TauList,
    #[arg(long, default_value_t = rankforge_core::losses::DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = 120)]
    pub instances: usize,
    #[arg(long, default_value_t = 12)]
    pub e2e_instances: usize,
    #[arg(long, default_value_t = rankforge_core::gradcheck::DEFAULT_SIM_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = rankforge_core::gradcheck::DEFAULT_E2E_TOLERANCE)]
    pub e2e_tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Test hook: perturbs the analytic gradients so the check must fail.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TausweepArgs {
    #[arg(long, value_parser = parse_taus, default_value = "1e-1,1e-2,1e-3,1e-4")]
    pub taus: TauList,
    /// Measure approximation error on seeded random similarity batches.
    #[arg(long)]
    pub random_batches: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train one model per temperature and report its test RSUM and NDCG.
    #[arg(long)]
    pub full: bool,
    /// Number of fixed batches for the approximation error.
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct ReproArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds 0..seeds, each with its own dataset and initialisation.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = rankforge_core::losses::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = rankforge_core::losses::DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub joint_dim: usize,
}
