//! Run manifest: everything needed to repeat a training run.

use std::path::{Path, PathBuf};

use cvf_sid::trainer::TrainConfig;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct ConfigSnapshot {
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    pub gamma: f64,
    pub lambda_aug: f64,
    pub steps: usize,
    pub seed: u64,
    pub preset: String,
    pub detach_second_pass: bool,
    pub aug_set_a: bool,
    pub aug_set_b: bool,
}

impl From<&TrainConfig> for ConfigSnapshot {
    fn from(c: &TrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            crop: c.crop,
            lr: c.lr,
            gamma: c.gamma,
            lambda_aug: c.lambda_aug,
            steps: c.steps,
            seed: c.seed,
            preset: c.preset.to_string(),
            detach_second_pass: c.detach_second_pass,
            aug_set_a: c.aug_set_a,
            aug_set_b: c.aug_set_b,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub scheme: String,
    pub config: ConfigSnapshot,
    pub seed: u64,
    pub threads: usize,
    pub build: String,
    pub data_dir: PathBuf,
    pub eval_dir: Option<PathBuf>,
    pub started: String,
    pub finished: Option<String>,
    pub mean_psnr_denoised: Option<f64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("{} {} ({profile})", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> cvf_sid::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        cvf_sid::data::atomic_write(&out_dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())
    }
}
