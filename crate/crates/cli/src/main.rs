mod artifacts;
mod commands;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Discrimination-power analysis of DNN features read from a manifest.
#[derive(Debug, Parser)]
#[command(name = "discpower", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Output directory for artifacts and the run summary.
    #[arg(long, global = true, default_value = "out")]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    #[arg(long, global = true, env = "DISCPOWER_THREADS", default_value_t = 0)]
    #[serde(skip)]
    pub threads: usize,
    /// Leave wall-clock timings out of every written file.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub reproducible: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ManifestArg {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub categories: usize,
    /// Raw sample feature dimension.
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub height: usize,
    #[arg(long, default_value_t = 3)]
    pub width: usize,
    #[arg(long, default_value_t = 30.0)]
    pub kappa_true: f64,
    /// Signal strengths are drawn uniformly from [strength-min, strength-max].
    #[arg(long, default_value_t = 0.2)]
    pub strength_min: f64,
    #[arg(long, default_value_t = 4.0)]
    pub strength_max: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Scale of the linear heads that produce logits; 0 gives uninformative logits.
    #[arg(long, default_value_t = 2.0)]
    pub head_scale: f64,
    /// Row-major indices of the cells that carry class signal.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 7])]
    pub signal_cells: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = ["conv_1".to_string(), "conv_2".to_string(), "conv_3".to_string()])]
    pub layers: Vec<String>,
    /// Also write a manifest in which this layer is perturbed.
    #[arg(long)]
    pub perturb_layer: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    pub perturb_scale: f64,
    /// Store tensors as f32 instead of f64.
    #[arg(long)]
    pub f32: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Projected dimension d′.
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sample_lr: f64,
    #[arg(long, default_value_t = 10)]
    pub alternations: usize,
    #[arg(long, default_value_t = 30)]
    pub gradient_steps: usize,
    #[arg(long, default_value_t = 10_000)]
    pub table_samples: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegionArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub kappa_p: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub kappa_tilde: f64,
    #[arg(long, default_value_t = 0.1)]
    pub region_lr: f64,
    #[arg(long, default_value_t = 50)]
    pub region_iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub importance_lr: f64,
    #[arg(long, default_value_t = 50)]
    pub importance_iterations: usize,
    /// Layers to fit; defaults to every manifest layer.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    /// Layer whose average regional strength the others are scaled to;
    /// defaults to the last layer.
    #[arg(long)]
    pub reference_layer: Option<String>,
    /// Allow unequal pooling windows when a layer's size is not a multiple
    /// of the target grid.
    #[arg(long)]
    pub adaptive_pool: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KnowledgeArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long, default_value_t = discpower::knowledge::DEFAULT_TAU)]
    pub tau: f64,
    /// Name of this checkpoint in the layer-curve export; defaults to the
    /// manifest name.
    #[arg(long)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttackArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Manifest of the attacked condition, paired by sample id.
    #[arg(long)]
    pub paired_manifest: PathBuf,
    /// Manifests of intermediate attack steps, in order.
    #[arg(long)]
    pub step_manifest: Vec<PathBuf>,
    /// Posterior threshold for confident regions.
    #[arg(long, default_value_t = 0.4)]
    pub theta_p: f64,
    /// Strength quantile above which a region counts as important.
    #[arg(long, default_value_t = 0.5)]
    pub theta_w: f64,
    #[arg(long)]
    pub adaptive_pool: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DistillArgs {
    /// Teacher manifest.
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Student manifest, paired by sample id.
    #[arg(long)]
    pub paired_manifest: PathBuf,
    #[arg(long)]
    pub adaptive_pool: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Fit the sample projection and mixture model.
    FitSample(SampleArgs),
    /// Fit importance weights and regional projections per layer.
    FitRegion(RegionArgs),
    /// Count knowledge points per layer.
    Knowledge(KnowledgeArgs),
    /// Compare regional features before and after an attack.
    Attack(AttackArgs),
    /// Compare student and teacher regional features.
    Distill(DistillArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads)
        .build_global()
        .context("configuring the worker pool")?;
    let c = &cli.common;
    match &cli.command {
        Command::Synth(a) => commands::synth(c, a),
        Command::FitSample(a) => commands::fit_sample(c, a),
        Command::FitRegion(a) => commands::fit_region(c, a),
        Command::Knowledge(a) => commands::knowledge(c, a),
        Command::Attack(a) => commands::attack(c, a),
        Command::Distill(a) => commands::distill(c, a),
    }
}
