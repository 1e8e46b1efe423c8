//! PSNR and SSIM with peak value 1.
//!
//! SSIM uses the common reference parameterization: an 11x11 Gaussian window
//! with sigma 1.5, `K1 = 0.01`, `K2 = 0.03`, averaged over valid window
//! positions and then over channels.

use crate::error::{arg_err, dim_err, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!("metric inputs differ: {} vs {}", a.shape(), b.shape()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(1 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Formats a metric for CSV output; infinite values serialize as `inf`.
pub fn format_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut horiz = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let row = &plane[y * w + x..y * w + x + SSIM_WINDOW];
            horiz[y * wo + x] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|d| horiz[(y + d) * wo + x] * k[d]).sum();
        }
    }
    out
}

pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return dim_err(format!("metric inputs differ: {} vs {}", s, b.shape()));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return arg_err(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.h, s.w
        ));
    }
    let k = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut planes = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let x: Vec<f64> = a.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let y: Vec<f64> = b.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let mu_x = filter_valid(&x, s.h, s.w, &k);
            let mu_y = filter_valid(&y, s.h, s.w, &k);
            let e_xx = filter_valid(&xx, s.h, s.w, &k);
            let e_yy = filter_valid(&yy, s.h, s.w, &k);
            let e_xy = filter_valid(&xy, s.h, s.w, &k);
            let mut acc = 0.0;
            for i in 0..mu_x.len() {
                let (mx, my) = (mu_x[i], mu_y[i]);
                let vx = e_xx[i] - mx * mx;
                let vy = e_yy[i] - my * my;
                let cov = e_xy[i] - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
            total += acc / mu_x.len() as f64;
            planes += 1;
        }
    }
    Ok(total / planes as f64)
}

/// Quality of one image before and after denoising, against its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_noisy: Option<f64>,
    pub psnr_denoised: f64,
    pub ssim_noisy: Option<f64>,
    pub ssim_denoised: f64,
}

impl ImageMetrics {
    pub fn compute<T: Real>(
        id: impl Into<String>,
        denoised: &Tensor<T>,
        reference: &Tensor<T>,
        noisy: Option<&Tensor<T>>,
    ) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            psnr_denoised: psnr(denoised, reference)?,
            ssim_denoised: ssim(denoised, reference)?,
            psnr_noisy: noisy.map(|n| psnr(n, reference)).transpose()?,
            ssim_noisy: noisy.map(|n| ssim(n, reference)).transpose()?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl MetricReport {
    pub fn mean_psnr_denoised(&self) -> f64 {
        mean_of(self.images.iter().map(|m| m.psnr_denoised))
    }

    pub fn mean_ssim_denoised(&self) -> f64 {
        mean_of(self.images.iter().map(|m| m.ssim_denoised))
    }

    pub fn mean_psnr_noisy(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.images.iter().map(|m| m.psnr_noisy).collect();
        v.map(|v| mean_of(v.into_iter()))
    }

    pub fn mean_ssim_noisy(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.images.iter().map(|m| m.ssim_noisy).collect();
        v.map(|v| mean_of(v.into_iter()))
    }

    pub const CSV_HEADER: &'static str = "image_id,psnr_noisy,psnr_denoised,ssim_noisy,ssim_denoised";

    /// Per-image rows followed by a `mean` row. Missing noisy inputs leave
    /// their columns empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(format_metric).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for m in &self.images {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                m.id,
                opt(m.psnr_noisy),
                format_metric(m.psnr_denoised),
                opt(m.ssim_noisy),
                format_metric(m.ssim_denoised)
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            opt(self.mean_psnr_noisy()),
            format_metric(self.mean_psnr_denoised()),
            opt(self.mean_ssim_noisy()),
            format_metric(self.mean_ssim_denoised())
        ));
        out
    }
}
