//! Procedural clean scenes for experiments with known ground truth.
//!
//! Each scene is a linear gradient background with a few discs and
//! rectangles on top. Shapes have soft boundaries and moderate contrast, so
//! most 6x6 windows are close to constant, which is what the patch-variance
//! objective assumes. All three channels carry the same luminance, so the
//! content is gray while the corrupting noise stays independent per channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ImageRecord};
use crate::error::{arg_err, Result};
use crate::noise::{sample_ground_truth, NoiseModelConfig};
use crate::tensor::{Real, Shape, Tensor};

const LO: f64 = 0.05;
const HI: f64 = 0.95;
/// Width in pixels of the logistic transition at shape boundaries.
const EDGE_SOFTNESS: f64 = 1.5;
/// Range of the luminance step between a shape and what lies beneath it.
const CONTRAST: std::ops::Range<f64> = 0.1..0.3;

enum Blob {
    Disc {
        cy: f64,
        cx: f64,
        r: f64,
        dv: f64,
    },
    Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
        dv: f64,
    },
}

impl Blob {
    /// Signed distance in pixels to the boundary, positive inside.
    fn inside(&self, y: f64, x: f64) -> f64 {
        match *self {
            Blob::Disc { cy, cx, r, .. } => r - ((y - cy).powi(2) + (x - cx).powi(2)).sqrt(),
            Blob::Rect { y0, x0, y1, x1, .. } => (y - y0).min(y1 - y).min(x - x0).min(x1 - x),
        }
    }

    fn step(&self) -> f64 {
        match *self {
            Blob::Disc { dv, .. } | Blob::Rect { dv, .. } => dv,
        }
    }
}

/// One `(1, 3, h, w)` scene with values in `[0.05, 0.95]`.
pub fn gray_scene<T: Real>(h: usize, w: usize, seed: u64) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return arg_err(format!("scene size must be positive, got {h}x{w}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.random_range(0.2..0.8);
    let (gy, gx) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let (hf, wf) = (h as f64, w as f64);
    let blobs: Vec<Blob> = (0..rng.random_range(3..7))
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let dv = sign * rng.random_range(CONTRAST);
            if rng.random_bool(0.5) {
                Blob::Disc {
                    cy: rng.random_range(0.0..hf),
                    cx: rng.random_range(0.0..wf),
                    r: rng.random_range(0.08..0.3) * hf.min(wf),
                    dv,
                }
            } else {
                let (y0, x0) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
                Blob::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(0.1..0.5) * hf,
                    x1: x0 + rng.random_range(0.1..0.5) * wf,
                    dv,
                }
            }
        })
        .collect();

    let mut lum = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / hf - 0.5, x as f64 / wf - 0.5);
            let mut v = base + gy * fy + gx * fx;
            for b in &blobs {
                let mask = 1.0 / (1.0 + (-b.inside(y as f64, x as f64) / EDGE_SOFTNESS).exp());
                v += mask * b.step();
            }
            lum[y * w + x] = v.clamp(LO, HI);
        }
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, y, x| {
        T::from_f64_lossy(lum[y * w + x])
    }))
}

/// `count` scenes; scene `i` uses seed `seed + i`.
pub fn gray_scenes<T: Real>(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
    (0..count as u64)
        .map(|i| gray_scene(h, w, seed.wrapping_add(i)))
        .collect()
}

/// `count` scenes corrupted by `noise`, with their ground truth attached.
/// Image ids are `img000`, `img001`, ...
pub fn noisy_dataset(count: usize, h: usize, w: usize, scene_seed: u64, noise: &NoiseModelConfig) -> Result<Dataset> {
    let clean = gray_scenes::<f32>(count, h, w, scene_seed)?;
    let records = sample_ground_truth(&clean, noise)?
        .into_iter()
        .enumerate()
        .map(|(i, (gt, noisy))| ImageRecord::new(format!("img{i:03}"), noisy).with_ground_truth(gt))
        .collect();
    Ok(Dataset::new(records))
}
