//! Mini-batch training and the train/evaluate schemes.
//!
//! Scheme `T` trains on one set and denoises another, `S` trains directly on
//! the images to be denoised, and `Cascade(n)` runs `S` `n` times, each stage
//! training a fresh model on the previous stage's output.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::augmentation::enumerate_combos;
use crate::data::Dataset;
use crate::error::{arg_err, Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig, VARIANCE_PATCH};
use crate::metrics::{psnr, ImageMetrics, MetricReport};
use crate::network::{save_checkpoint, CvfModel, Decomposition, Preset};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_EVERY: usize = 500;
pub const PROGRESS_EVERY: usize = 100;
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cvfm";
pub const MODEL_FILE: &str = "model.cvfm";

// Keeps batch draws off the stream used for weight initialization.
const BATCH_SEED_SALT: u64 = 0x5bd1_e995_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    pub gamma: f64,
    pub lambda_aug: f64,
    pub steps: usize,
    pub seed: u64,
    pub preset: Preset,
    pub detach_second_pass: bool,
    pub aug_set_a: bool,
    pub aug_set_b: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            crop: 40,
            lr: 1e-4,
            gamma: 1.0,
            lambda_aug: 0.1,
            steps: 1000,
            seed: 0,
            preset: Preset::Paper,
            detach_second_pass: false,
            aug_set_a: true,
            aug_set_b: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop < VARIANCE_PATCH {
            return arg_err(format!("crop must be at least {VARIANCE_PATCH}, got {}", self.crop));
        }
        if self.batch_size == 0 {
            return arg_err("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return arg_err(format!("lr must be positive, got {}", self.lr));
        }
        if !self.gamma.is_finite() || !self.lambda_aug.is_finite() || self.lambda_aug < 0.0 {
            return arg_err("gamma and lambda_aug must be finite, lambda_aug non-negative");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            lambda_aug: self.lambda_aug,
            combos: enumerate_combos(self.aug_set_a, self.aug_set_b),
            detach_second_pass: self.detach_second_pass,
            patch: VARIANCE_PATCH,
        }
    }
}

/// Where and how loudly a run reports.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    /// Loss log and checkpoints go here when set.
    pub dir: Option<PathBuf>,
    /// Progress lines on standard error.
    pub progress: bool,
}

impl TrainOutput {
    pub fn quiet() -> Self {
        Self::default()
    }

    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            progress: true,
        }
    }

    fn sub(&self, name: &str) -> Self {
        Self {
            dir: self.dir.as_ref().map(|d| d.join(name)),
            progress: self.progress,
        }
    }
}

/// Applies dihedral transform `t` (0..8) to a square patch: `t % 4` quarter
/// turns counter-clockwise, then a horizontal flip when `t >= 4`.
fn dihedral_index(t: u8, size: usize, y: usize, x: usize) -> (usize, usize) {
    let m = size - 1;
    let (y, x) = if t >= 4 { (y, m - x) } else { (y, x) };
    match t % 4 {
        0 => (y, x),
        1 => (x, m - y),
        2 => (m - y, m - x),
        _ => (m - x, y),
    }
}

fn check_dataset(dataset: &Dataset, crop: usize) -> Result<()> {
    if dataset.is_empty() {
        return arg_err("dataset is empty");
    }
    for (i, img) in dataset.noisy_images().enumerate() {
        let s = img.shape();
        if s.n != 1 || s.c != 3 {
            return arg_err(format!("image {} has shape {s}, expected (1, 3, h, w)", dataset.id(i)));
        }
        if s.h < crop || s.w < crop {
            return arg_err(format!(
                "image {} is {}x{}, smaller than the {crop}x{crop} crop",
                dataset.id(i),
                s.h,
                s.w
            ));
        }
    }
    Ok(())
}

/// Draws the patches and transforms of one step.
pub fn batch_plan(dataset: &Dataset, cfg: &TrainConfig, step: usize) -> Vec<(usize, usize, usize, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_SEED_SALT);
    rng.set_stream(step as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let i = rng.random_range(0..dataset.len());
            let s = dataset.noisy(i).shape();
            let y = rng.random_range(0..=s.h - cfg.crop);
            let x = rng.random_range(0..=s.w - cfg.crop);
            (i, y, x, rng.random_range(0..8u8))
        })
        .collect()
}

/// A `(batch_size, 3, crop, crop)` batch of randomly placed, randomly
/// transformed patches. Deterministic in `(cfg.seed, step)`.
pub fn sample_batch(dataset: &Dataset, cfg: &TrainConfig, step: usize) -> Result<Tensor<f32>> {
    cfg.validate()?;
    check_dataset(dataset, cfg.crop)?;
    let k = cfg.crop;
    let plan = batch_plan(dataset, cfg, step);
    Ok(Tensor::from_fn(Shape::new(cfg.batch_size, 3, k, k), |n, c, y, x| {
        let (i, y0, x0, t) = plan[n];
        let (sy, sx) = dihedral_index(t, k, y, x);
        dataset.noisy(i).at(0, c, y0 + sy, x0 + sx)
    }))
}

pub struct TrainResult {
    pub model: CvfModel<f32>,
    pub log: Vec<LossBreakdown>,
}

fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.clamp(0.0, 1.0)
}

fn check_finite(step: usize, b: &LossBreakdown) -> Result<()> {
    for (term, value) in b.terms() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, term, value });
        }
    }
    Ok(())
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Write {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains a fresh model on the noisy images of `dataset`.
///
/// Only noisy inputs are read. With an output directory the loss log is
/// streamed to [`LOSS_LOG_FILE`], [`CHECKPOINT_FILE`] is rewritten every
/// [`CHECKPOINT_EVERY`] steps and [`MODEL_FILE`] holds the final weights.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out: &TrainOutput) -> Result<TrainResult> {
    cfg.validate()?;
    check_dataset(dataset, cfg.crop)?;
    let loss_cfg = cfg.loss_config();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut model = CvfModel::<f32>::from_preset(cfg.seed, cfg.preset);
    let mut state = AdamState::zeros_like(&model.params());

    let mut log_file = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(write_err(dir))?;
            let path = dir.join(LOSS_LOG_FILE);
            let mut f = fs::File::create(&path).map_err(write_err(&path))?;
            writeln!(f, "{}", LossBreakdown::CSV_HEADER).map_err(write_err(&path))?;
            Some((f, path))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = sample_batch(dataset, cfg, step)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let input = tape.constant(batch);
        let (vars, dec) = total_loss(&mut tape, &bound, input, &loss_cfg)?;
        let breakdown = vars.breakdown(&tape);
        check_finite(step, &breakdown)?;
        let grads = bound.gradients(&tape.backward(vars.total));

        if let Some((f, path)) = &mut log_file {
            writeln!(f, "{}", breakdown.csv_row(step, cfg.lr)).map_err(write_err(path))?;
        }
        if out.progress && step % PROGRESS_EVERY == 0 {
            let probe = psnr(&clamp01(tape.value(dec.clean)), &clamp01(tape.value(input)))?;
            eprintln!("step={step} total={:.6e} psnr_probe={probe:.3}", breakdown.total);
        }
        drop(tape);
        adam_step(&mut model.params_mut(), &grads, &mut state, &adam)?;
        log.push(breakdown);

        if let Some(dir) = &out.dir {
            if step % CHECKPOINT_EVERY == 0 {
                save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(write_err(dir))?;
        save_checkpoint(&model, &dir.join(MODEL_FILE))?;
    }
    Ok(TrainResult { model, log })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    T,
    S,
    Cascade(usize),
}

impl Scheme {
    pub fn validate(self) -> Result<()> {
        match self {
            Scheme::Cascade(n) if n < 2 => arg_err(format!("cascade needs at least 2 stages, got {n}")),
            _ => Ok(()),
        }
    }

    fn stages(self) -> usize {
        match self {
            Scheme::Cascade(n) => n,
            _ => 1,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::T => f.write_str("T"),
            Scheme::S => f.write_str("S"),
            Scheme::Cascade(n) => write!(f, "S{n}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "t" => Ok(Scheme::T),
            "S" | "s" => Ok(Scheme::S),
            _ => match s.strip_prefix(['S', 's']).map(str::parse::<usize>) {
                Some(Ok(n)) => {
                    let scheme = Scheme::Cascade(n);
                    scheme.validate()?;
                    Ok(scheme)
                }
                _ => arg_err(format!("unknown scheme `{s}`, expected T, S or S<n>")),
            },
        }
    }
}

/// Padded inference over every noisy image of `dataset`.
pub fn denoise_dataset(model: &CvfModel<f32>, dataset: &Dataset) -> Result<Vec<Decomposition<f32>>> {
    dataset.noisy_images().map(|img| model.forward_padded(img)).collect()
}

pub struct StageResult {
    pub model: CvfModel<f32>,
    pub log: Vec<LossBreakdown>,
    /// Clean estimates of this stage, clamped to `[0, 1]`.
    pub denoised: Vec<Tensor<f32>>,
}

pub struct SchemeResult {
    pub stages: Vec<StageResult>,
    /// Noise maps of the last stage, from its padded inference.
    pub last_decompositions: Vec<Decomposition<f32>>,
    /// Present when the evaluation set carries clean references.
    pub metrics: Option<MetricReport>,
}

impl SchemeResult {
    pub fn denoised(&self) -> &[Tensor<f32>] {
        &self.stages.last().expect("at least one stage").denoised
    }
}

/// Scores `denoised` against the clean references of `eval_set`.
pub fn evaluate(eval_set: &Dataset, denoised: &[Tensor<f32>]) -> Result<Option<MetricReport>> {
    if !eval_set.has_clean() {
        return Ok(None);
    }
    let mut report = MetricReport::default();
    for (i, d) in denoised.iter().enumerate() {
        let reference = eval_set.clean(i).expect("has_clean checked");
        let noisy = clamp01(eval_set.noisy(i));
        report.images.push(ImageMetrics::compute(
            eval_set.id(i),
            &clamp01(d),
            reference,
            Some(&noisy),
        )?);
    }
    Ok(Some(report))
}

/// Runs `scheme` and denoises `eval_set`. Stage `k` (from 0) of a cascade
/// trains with seed `cfg.seed + k`; `S` and `Cascade` ignore `train_set`.
pub fn run_scheme(
    train_set: Option<&Dataset>,
    eval_set: &Dataset,
    scheme: Scheme,
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<SchemeResult> {
    scheme.validate()?;
    if scheme == Scheme::T {
        let Some(train_set) = train_set else {
            return arg_err("scheme T needs a training set");
        };
        let result = train(train_set, cfg, out)?;
        let decs = denoise_dataset(&result.model, eval_set)?;
        let denoised: Vec<_> = decs.iter().map(|d| clamp01(&d.clean)).collect();
        let metrics = evaluate(eval_set, &denoised)?;
        return Ok(SchemeResult {
            stages: vec![StageResult {
                model: result.model,
                log: result.log,
                denoised,
            }],
            last_decompositions: decs,
            metrics,
        });
    }

    let n = scheme.stages();
    let mut stages = Vec::with_capacity(n);
    let mut working = eval_set.clone();
    let mut last = Vec::new();
    for k in 0..n {
        let stage_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        let stage_out = if n > 1 {
            out.sub(&format!("stage{}", k + 1))
        } else {
            out.clone()
        };
        let result = train(&working, &stage_cfg, &stage_out)?;
        let decs = denoise_dataset(&result.model, &working)?;
        let denoised: Vec<_> = decs.iter().map(|d| clamp01(&d.clean)).collect();
        if k + 1 < n {
            working = working.with_noisy(denoised.clone());
        }
        last = decs;
        stages.push(StageResult {
            model: result.model,
            log: result.log,
            denoised,
        });
    }
    let metrics = evaluate(eval_set, &stages.last().expect("n >= 1").denoised)?;
    Ok(SchemeResult {
        stages,
        last_decompositions: last,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageRecord;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| (c * 10_000 + y * 100 + x) as f32)
    }

    fn cfg(batch: usize, crop: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            crop,
            preset: Preset::Small,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dihedral_group_is_eight_distinct_bijections() {
        let k = 4;
        let mut seen = Vec::new();
        for t in 0..8u8 {
            let mut img = vec![usize::MAX; k * k];
            for y in 0..k {
                for x in 0..k {
                    let (sy, sx) = dihedral_index(t, k, y, x);
                    img[y * k + x] = sy * k + sx;
                }
            }
            let mut sorted = img.clone();
            sorted.sort();
            assert_eq!(sorted, (0..k * k).collect::<Vec<_>>());
            assert!(!seen.contains(&img));
            seen.push(img);
        }
        assert_eq!(seen[0], (0..k * k).collect::<Vec<_>>());
    }

    #[test]
    fn default_batch_shape() {
        let ds = Dataset::from_noisy(vec![("a".into(), ramp(50, 60))]);
        let b = sample_batch(&ds, &TrainConfig::default(), 1).unwrap();
        assert_eq!(b.shape(), Shape::new(64, 3, 40, 40));
    }

    #[test]
    fn full_crop_with_identity_transform_is_the_image() {
        let img = ramp(12, 12);
        let ds = Dataset::from_noisy(vec![("a".into(), img.clone())]);
        let c = cfg(1, 12);
        let step = (0..1000)
            .find(|&s| batch_plan(&ds, &c, s)[0].3 == 0)
            .expect("identity drawn at some step");
        assert_eq!(sample_batch(&ds, &c, step).unwrap(), img);
    }

    #[test]
    fn transform_histogram_is_uniform() {
        let ds = Dataset::from_noisy(vec![("a".into(), ramp(16, 16))]);
        let c = cfg(100, 8);
        let mut counts = [0usize; 8];
        for step in 0..100 {
            for (_, _, _, t) in batch_plan(&ds, &c, step) {
                counts[t as usize] += 1;
            }
        }
        for n in counts {
            let p = n as f64 / 10_000.0;
            assert!((p - 0.125).abs() < 0.125 * 0.05 + 0.01, "{counts:?}");
        }
    }

    #[test]
    fn batches_are_deterministic_per_step() {
        let ds = Dataset::from_noisy(vec![("a".into(), ramp(20, 24)), ("b".into(), ramp(30, 20))]);
        let c = cfg(4, 10);
        assert_eq!(sample_batch(&ds, &c, 3).unwrap(), sample_batch(&ds, &c, 3).unwrap());
        assert_ne!(sample_batch(&ds, &c, 3).unwrap(), sample_batch(&ds, &c, 4).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = Dataset::from_noisy(vec![("a".into(), ramp(20, 8))]);
        assert!(matches!(sample_batch(&ds, &cfg(2, 10), 0), Err(Error::Argument(_))));
        assert!(cfg(2, 5).validate().is_err());
        assert!(cfg(0, 10).validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..cfg(1, 10) }.validate().is_err());
        assert!(train(
            &Dataset::new(Vec::<ImageRecord>::new()),
            &cfg(1, 10),
            &TrainOutput::quiet()
        )
        .is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("T".parse::<Scheme>().unwrap(), Scheme::T);
        assert_eq!("S".parse::<Scheme>().unwrap(), Scheme::S);
        assert_eq!("S3".parse::<Scheme>().unwrap(), Scheme::Cascade(3));
        assert!("S1".parse::<Scheme>().is_err());
        assert!("X".parse::<Scheme>().is_err());
        assert!(Scheme::Cascade(1).validate().is_err());
        assert_eq!(Scheme::Cascade(2).to_string(), "S2");
    }
}
