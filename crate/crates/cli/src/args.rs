//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cvf_sid::noise::NoiseDistribution;
use cvf_sid::trainer::TrainConfig;
use cvf_sid::Preset;

#[derive(Debug, Parser)]
#[command(
    name = "cvf-sid",
    version,
    about = "Self-supervised denoising by cyclic decomposition"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file; keys are flag names. Flags given on the
    /// command line override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads (default: `CVF_THREADS`, else all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt clean images (or procedural scenes) with the noise model.
    Synthesize(SynthesizeArgs),
    /// Train one model (scheme T or S) and denoise the evaluation set.
    Train(TrainArgs),
    /// Denoise every PNG in a directory with a trained model.
    Denoise(DenoiseArgs),
    /// Write the clean estimate and both noise maps of one image.
    Decompose(DecomposeArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Train a cascade of `n` models, each on the previous outputs.
    Cascade(CascadeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Distribution {
    Gaussian,
    Uniform,
}

impl From<Distribution> for NoiseDistribution {
    fn from(d: Distribution) -> Self {
        match d {
            Distribution::Gaussian => NoiseDistribution::Gaussian,
            Distribution::Uniform => NoiseDistribution::Uniform,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Directory of clean 8-bit RGB PNGs.
    #[arg(
        long,
        value_name = "DIR",
        required_unless_present = "scenes",
        conflicts_with = "scenes"
    )]
    pub clean_dir: Option<PathBuf>,
    /// Generate this many procedural gray scenes instead of reading PNGs.
    #[arg(long, value_name = "N")]
    pub scenes: Option<usize>,
    /// Side of the procedural scenes.
    #[arg(long, default_value_t = 128, value_name = "PX")]
    pub size: usize,
    /// Seed of the procedural scenes.
    #[arg(long, default_value_t = 0, value_name = "N")]
    pub scene_seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0.08, value_name = "F")]
    pub sigma_d: f64,
    #[arg(long, default_value_t = 0.04, value_name = "F")]
    pub sigma_i: f64,
    #[arg(long, default_value_t = 1.0, value_name = "F")]
    pub gamma: f64,
    #[arg(long, default_value_t = 0, value_name = "N")]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Distribution::Gaussian)]
    pub distribution: Distribution,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: cvf_sid::Error| e.to_string())
}

/// Every `TrainConfig` field. Unset flags fall back to the defaults.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    #[arg(long, value_parser = parse_preset, value_name = "paper|small")]
    pub preset: Option<Preset>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "PX")]
    pub crop: Option<usize>,
    #[arg(long, value_name = "F")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "F")]
    pub gamma: Option<f64>,
    #[arg(long, value_name = "F")]
    pub lambda_aug: Option<f64>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Stop gradients at the re-fed second-pass inputs.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub detach_second_pass: Option<bool>,
    /// Enable augmentation set A.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub aug_set_a: Option<bool>,
    /// Enable augmentation set B.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub aug_set_b: Option<bool>,
    /// Suppress progress lines.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub quiet: Option<bool>,
}

impl TrainFlags {
    pub fn to_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            crop: self.crop.unwrap_or(d.crop),
            lr: self.lr.unwrap_or(d.lr),
            gamma: self.gamma.unwrap_or(d.gamma),
            lambda_aug: self.lambda_aug.unwrap_or(d.lambda_aug),
            steps: self.steps.unwrap_or(d.steps),
            seed: self.seed.unwrap_or(d.seed),
            preset: self.preset.unwrap_or(d.preset),
            detach_second_pass: self.detach_second_pass.unwrap_or(d.detach_second_pass),
            aug_set_a: self.aug_set_a.unwrap_or(d.aug_set_a),
            aug_set_b: self.aug_set_b.unwrap_or(d.aug_set_b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SingleScheme {
    #[value(name = "T")]
    T,
    #[value(name = "S")]
    S,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset root (`noisy/`, optional `clean/` and `maps/`).
    #[arg(long, value_name = "DIR")]
    pub data_dir: PathBuf,
    /// Dataset to denoise after training (scheme T); defaults to the training set.
    #[arg(long, value_name = "DIR")]
    pub eval_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SingleScheme::T)]
    pub scheme: SingleScheme,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct CascadeArgs {
    /// Number of stages, at least 2.
    #[arg(long, value_name = "K")]
    pub n: usize,
    #[arg(long, value_name = "DIR")]
    pub data_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub in_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Denoised images.
    #[arg(long, value_name = "DIR")]
    pub pred_dir: PathBuf,
    /// Clean references, matched by file name.
    #[arg(long, value_name = "DIR")]
    pub ref_dir: PathBuf,
    /// Optional noisy inputs, for the before-denoising columns.
    #[arg(long, value_name = "DIR")]
    pub noisy_dir: Option<PathBuf>,
    /// CSV output path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}
