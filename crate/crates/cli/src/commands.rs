//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use cvf_sid::data::{
    atomic_write, file_stem, list_pngs, load_image, min_max_normalize, save_float_map, save_image, Dataset,
};
use cvf_sid::metrics::{ImageMetrics, MetricReport};
use cvf_sid::network::load_checkpoint;
use cvf_sid::noise::{sample_ground_truth, NoiseModelConfig};
use cvf_sid::synthetic::gray_scenes;
use cvf_sid::trainer::{denoise_dataset, run_scheme, Scheme, SchemeResult, TrainConfig, TrainOutput};
use cvf_sid::Tensor;

use crate::args::{CascadeArgs, DecomposeArgs, DenoiseArgs, EvalArgs, SingleScheme, SynthesizeArgs, TrainArgs};
use crate::manifest::{build_id, now, ConfigSnapshot, RunManifest};

/// Failure split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: exit 2.
    Usage(String),
    /// The work itself failed: exit 1.
    Runtime(cvf_sid::Error),
}

impl From<cvf_sid::Error> for Failure {
    fn from(e: cvf_sid::Error) -> Self {
        Failure::Runtime(e)
    }
}

pub type Outcome = std::result::Result<(), Failure>;

fn need_dir(p: &Path, what: &str) -> Outcome {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} is not a directory", p.display())))
    }
}

fn need_file(p: &Path, what: &str) -> Outcome {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn make_dir(p: &Path) -> Outcome {
    fs::create_dir_all(p).map_err(|source| {
        Failure::Runtime(cvf_sid::Error::Write {
            path: p.to_path_buf(),
            source,
        })
    })
}

fn validate(cfg: &TrainConfig) -> Outcome {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))
}

pub fn synthesize(a: &SynthesizeArgs) -> Outcome {
    let noise = NoiseModelConfig {
        gamma: a.gamma,
        sigma_d: a.sigma_d,
        sigma_i: a.sigma_i,
        distribution: a.distribution.into(),
        seed: a.seed,
    };
    noise.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (ids, clean): (Vec<String>, Vec<Tensor<f32>>) = match (&a.clean_dir, a.scenes) {
        (Some(dir), _) => {
            need_dir(dir, "clean dir")?;
            let files = list_pngs(dir)?;
            if files.is_empty() {
                return Err(Failure::Usage(format!("no png files in {}", dir.display())));
            }
            let images = files
                .iter()
                .map(|p| load_image(p))
                .collect::<cvf_sid::Result<Vec<_>>>()?;
            (files.iter().map(|p| file_stem(p)).collect(), images)
        }
        (None, Some(n)) => {
            let scenes = gray_scenes(n, a.size, a.size, a.scene_seed)?;
            ((0..n).map(|i| format!("scene{i:04}")).collect(), scenes)
        }
        (None, None) => return Err(Failure::Usage("one of --clean-dir or --scenes is required".into())),
    };
    let triples = sample_ground_truth(&clean, &noise)?;
    let (noisy_dir, clean_dir, maps_dir) = (a.out_dir.join("noisy"), a.out_dir.join("clean"), a.out_dir.join("maps"));
    for d in [&noisy_dir, &clean_dir, &maps_dir] {
        make_dir(d)?;
    }
    for (id, (gt, noisy)) in ids.iter().zip(&triples) {
        save_image(noisy, &noisy_dir.join(format!("{id}.png")))?;
        save_image(&gt.clean, &clean_dir.join(format!("{id}.png")))?;
        save_float_map(&gt.dep_map, &maps_dir.join(format!("{id}_dep.cvfr")))?;
        save_float_map(&gt.indep_map, &maps_dir.join(format!("{id}_indep.cvfr")))?;
    }
    eprintln!("wrote {} images to {}", ids.len(), a.out_dir.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> std::result::Result<Dataset, Failure> {
    need_dir(dir, "data dir")?;
    need_dir(&dir.join("noisy"), "noisy dir")?;
    Dataset::load_dir(dir).map_err(|e| match e {
        cvf_sid::Error::Argument(m) => Failure::Usage(m),
        e => Failure::Runtime(e),
    })
}

/// Denoised PNGs under `out/denoised`, plus `metrics.csv` when references exist.
fn write_results(out: &Path, eval_set: &Dataset, result: &SchemeResult) -> Outcome {
    let dir = out.join("denoised");
    make_dir(&dir)?;
    for (i, img) in result.denoised().iter().enumerate() {
        save_image(img, &dir.join(format!("{}.png", eval_set.id(i))))?;
    }
    if let Some(report) = &result.metrics {
        atomic_write(&out.join("metrics.csv"), report.to_csv().as_bytes())?;
        eprintln!(
            "mean psnr {:.3} dB, ssim {:.4}",
            report.mean_psnr_denoised(),
            report.mean_ssim_denoised()
        );
    }
    Ok(())
}

struct Run<'a> {
    command: &'a str,
    scheme: Scheme,
    cfg: TrainConfig,
    quiet: bool,
    threads: usize,
    data_dir: &'a Path,
    eval_dir: Option<&'a Path>,
    out_dir: &'a Path,
}

impl Run<'_> {
    fn execute(&self) -> Outcome {
        validate(&self.cfg)?;
        self.scheme.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        let data = load_dataset(self.data_dir)?;
        let eval = self.eval_dir.map(load_dataset).transpose()?;
        make_dir(self.out_dir)?;
        let mut manifest = RunManifest {
            command: self.command.into(),
            scheme: self.scheme.to_string(),
            config: ConfigSnapshot::from(&self.cfg),
            seed: self.cfg.seed,
            threads: self.threads,
            build: build_id(),
            data_dir: absolute(self.data_dir),
            eval_dir: self.eval_dir.map(absolute),
            started: now(),
            finished: None,
            mean_psnr_denoised: None,
        };
        manifest.write(self.out_dir)?;
        let out = TrainOutput {
            dir: Some(self.out_dir.to_path_buf()),
            progress: !self.quiet,
        };
        // Scheme T trains on `data` and denoises `eval` (or `data` itself);
        // the single-set schemes train and denoise the same images.
        let (train_set, eval_set) = match (self.scheme, &eval) {
            (Scheme::T, Some(e)) => (Some(&data), e),
            _ => (Some(&data), &data),
        };
        let result = run_scheme(train_set, eval_set, self.scheme, &self.cfg, &out)?;
        write_results(self.out_dir, eval_set, &result)?;
        manifest.finished = Some(now());
        manifest.mean_psnr_denoised = result.metrics.as_ref().map(MetricReport::mean_psnr_denoised);
        manifest.write(self.out_dir)?;
        Ok(())
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn train(a: &TrainArgs, threads: usize) -> Outcome {
    let scheme = match a.scheme {
        SingleScheme::T => Scheme::T,
        SingleScheme::S => Scheme::S,
    };
    if scheme == Scheme::S && a.eval_dir.is_some() {
        return Err(Failure::Usage(
            "scheme S trains on the images it denoises; drop --eval-dir".into(),
        ));
    }
    Run {
        command: "train",
        scheme,
        cfg: a.train.to_config(),
        quiet: a.train.quiet.unwrap_or(false),
        threads,
        data_dir: &a.data_dir,
        eval_dir: a.eval_dir.as_deref(),
        out_dir: &a.out_dir,
    }
    .execute()
}

pub fn cascade(a: &CascadeArgs, threads: usize) -> Outcome {
    if a.n < 2 {
        return Err(Failure::Usage(format!("cascade needs --n of at least 2, got {}", a.n)));
    }
    Run {
        command: "cascade",
        scheme: Scheme::Cascade(a.n),
        cfg: a.train.to_config(),
        quiet: a.train.quiet.unwrap_or(false),
        threads,
        data_dir: &a.data_dir,
        eval_dir: None,
        out_dir: &a.out_dir,
    }
    .execute()
}

fn open_model(p: &Path) -> std::result::Result<cvf_sid::CvfModel<f32>, Failure> {
    need_file(p, "model")?;
    Ok(load_checkpoint(p)?)
}

pub fn denoise(a: &DenoiseArgs) -> Outcome {
    let model = open_model(&a.model)?;
    need_dir(&a.in_dir, "input dir")?;
    let files = list_pngs(&a.in_dir)?;
    let images = files
        .iter()
        .map(|p| Ok((file_stem(p), load_image(p)?)))
        .collect::<cvf_sid::Result<Vec<_>>>()?;
    let dataset = Dataset::from_noisy(images);
    let decs = denoise_dataset(&model, &dataset)?;
    make_dir(&a.out_dir)?;
    for (i, d) in decs.iter().enumerate() {
        save_image(
            &d.clean.clamp(0.0, 1.0),
            &a.out_dir.join(format!("{}.png", dataset.id(i))),
        )?;
    }
    eprintln!("denoised {} images into {}", decs.len(), a.out_dir.display());
    Ok(())
}

pub fn decompose(a: &DecomposeArgs) -> Outcome {
    let model = open_model(&a.model)?;
    need_file(&a.image, "image")?;
    let image = load_image(&a.image)?;
    let dec = model.forward_padded(&image)?;
    let stem = file_stem(&a.image);
    make_dir(&a.out_dir)?;
    let out = |suffix: &str| a.out_dir.join(format!("{stem}_{suffix}"));
    save_image(&dec.clean.clamp(0.0, 1.0), &out("clean.png"))?;
    save_float_map(&dec.dep, &out("dep.cvfr"))?;
    save_float_map(&dec.indep, &out("indep.cvfr"))?;
    save_image(&min_max_normalize(&dec.dep), &out("dep_vis.png"))?;
    save_image(&min_max_normalize(&dec.indep), &out("indep_vis.png"))?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Outcome {
    need_dir(&a.pred_dir, "prediction dir")?;
    need_dir(&a.ref_dir, "reference dir")?;
    if let Some(n) = &a.noisy_dir {
        need_dir(n, "noisy dir")?;
    }
    let preds = list_pngs(&a.pred_dir)?;
    if preds.is_empty() {
        return Err(Failure::Usage(format!("no png files in {}", a.pred_dir.display())));
    }
    let mut report = MetricReport::default();
    for p in &preds {
        let name = p.file_name().expect("listed file");
        let reference = a.ref_dir.join(name);
        if !reference.is_file() {
            return Err(Failure::Usage(format!(
                "no reference {} for {}",
                reference.display(),
                p.display()
            )));
        }
        let noisy = match &a.noisy_dir {
            Some(d) => Some(load_image(&d.join(name))?),
            None => None,
        };
        report.images.push(ImageMetrics::compute(
            file_stem(p),
            &load_image(p)?,
            &load_image(&reference)?,
            noisy.as_ref(),
        )?);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(parent)?;
    }
    atomic_write(&a.out, report.to_csv().as_bytes())?;
    eprintln!(
        "mean psnr {:.3} dB over {} images",
        report.mean_psnr_denoised(),
        report.images.len()
    );
    Ok(())
}
