//! Forward and adjoint kernels for every tensor operation the network and
//! its losses use.
//!
//! Each `*_backward` function maps an output adjoint to input adjoints. The
//! [`Tape`](crate::tape::Tape) wires them together; inference calls the
//! forward halves directly.

use std::any::TypeId;

use rayon::prelude::*;

use crate::error::{arg_err, dim_err, Result};
use crate::fastconv;
use crate::tensor::{Real, Shape, Tensor};

/// Floor applied to the base of [`pow_safe`].
pub const POW_EPS: f64 = 1e-4;

/// A stride-1 square convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `(out_c, in_c, k, k)`.
    pub weight: Tensor<T>,
    /// `(1, out_c, 1, 1)`.
    pub bias: Tensor<T>,
    pub padding: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w || !(ws.h == 1 || ws.h == 3) {
            return dim_err(format!("kernel must be 1x1 or 3x3, got {}x{}", ws.h, ws.w));
        }
        if bias.shape() != Shape::new(1, ws.n, 1, 1) {
            return dim_err(format!(
                "bias shape {} does not match {} output channels",
                bias.shape(),
                ws.n
            ));
        }
        Ok(Self { weight, bias, padding })
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize, padding: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(out_c, in_c, k, k)),
            Tensor::zeros(Shape::new(1, out_c, 1, 1)),
            padding,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Convolution with finiteness checks on input and parameters.
pub fn conv2d<T: Real>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    input.check_finite("conv2d input")?;
    layer.weight.check_finite("conv2d weight")?;
    layer.bias.check_finite("conv2d bias")?;
    conv2d_forward(input, &layer.weight, &layer.bias, layer.padding)
}

fn conv_out_shape(x: Shape, w: Shape, pad: usize) -> Result<Shape> {
    if x.c != w.c {
        return dim_err(format!("conv2d: input has {} channels, kernel expects {}", x.c, w.c));
    }
    let (hp, wp) = (x.h + 2 * pad, x.w + 2 * pad);
    if hp < w.h || wp < w.w {
        return dim_err(format!(
            "conv2d: padded input {hp}x{wp} smaller than kernel {}x{}",
            w.h, w.w
        ));
    }
    Ok(Shape::new(x.n, w.n, hp - w.h + 1, wp - w.w + 1))
}

/// Unfolds one sample into a `(c*k*k, ho*wo)` column matrix with zero padding.
fn im2col<T: Real>(sample: &[T], s: Shape, k: usize, pad: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let hw = ho * wo;
    let pad = pad as isize;
    for c in 0..s.c {
        let plane = &sample[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                // ox range for which ix = ox + dx lies inside the image
                let x0 = (-dx).clamp(0, wo as isize) as usize;
                let x1 = (s.w as isize - dx).clamp(0, wo as isize) as usize;
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= s.h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    out[..x0].fill(T::zero());
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                    out[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
fn col2im<T: Real>(cols: &[T], s: Shape, k: usize, pad: usize, ho: usize, wo: usize, sample: &mut [T]) {
    let hw = ho * wo;
    let pad = pad as isize;
    for c in 0..s.c {
        let plane = &mut sample[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).clamp(0, wo as isize) as usize;
                let x1 = (s.w as isize - dx).clamp(0, wo as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[iy as usize * s.w + sx0..iy as usize * s.w + sx0 + (x1 - x0)];
                    for (d, &g) in dst.iter_mut().zip(&src[oy * wo + x0..oy * wo + x1]) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

fn direct_columns(k: usize, pad: usize) -> bool {
    k == 1 && pad == 0
}

fn as_f32<T: Real>(s: &[T]) -> Option<&[f32]> {
    // SAFETY: `T` is `f32` when the type ids agree.
    (TypeId::of::<T>() == TypeId::of::<f32>())
        .then(|| unsafe { std::slice::from_raw_parts(s.as_ptr().cast::<f32>(), s.len()) })
}

fn as_f32_mut<T: Real>(s: &mut [T]) -> Option<&mut [f32]> {
    // SAFETY: as in `as_f32`.
    (TypeId::of::<T>() == TypeId::of::<f32>())
        .then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast::<f32>(), s.len()) })
}

fn use_fast_path<T: Real>(k: usize, pad: usize) -> bool {
    k == 3 && pad == 1 && TypeId::of::<T>() == TypeId::of::<f32>() && fastconv::available()
}

pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let os = conv_out_shape(xs, ws, pad)?;
    if bias.len() != ws.n {
        return dim_err(format!("conv2d: bias length {} != out_c {}", bias.len(), ws.n));
    }
    let k = ws.h;
    let kdim = ws.c * k * k;
    let hw = os.plane();
    let in_per = xs.c * xs.plane();
    let out_per = os.c * hw;
    let mut out = Tensor::zeros(os);
    if use_fast_path::<T>(k, pad) {
        let pw = fastconv::PackedWeights::forward(as_f32(weight.data()).expect("f32"), ws.n, ws.c);
        let b = as_f32(bias.data()).expect("f32");
        let xf = as_f32(x.data()).expect("f32");
        as_f32_mut(out.data_mut())
            .expect("f32")
            .par_chunks_mut(out_per)
            .zip(xf.par_chunks(in_per))
            .for_each(|(y, xi)| fastconv::forward_sample(xi, xs.h, xs.w, &pw, Some(b), y));
        return Ok(out);
    }
    let w = weight.data();
    let b = bias.data();
    out.data_mut()
        .par_chunks_mut(out_per)
        .zip(x.data().par_chunks(in_per))
        .for_each(|(y, xi)| {
            for (o, row) in y.chunks_mut(hw).enumerate() {
                row.fill(b[o]);
            }
            let mut buf;
            let cols: &[T] = if direct_columns(k, pad) {
                xi
            } else {
                buf = vec![T::zero(); kdim * hw];
                im2col(xi, xs, k, pad, os.h, os.w, &mut buf);
                &buf
            };
            T::gemm(
                ws.n,
                kdim,
                hw,
                T::one(),
                w,
                (kdim as isize, 1),
                cols,
                (hw as isize, 1),
                T::one(),
                y,
                (hw as isize, 1),
            );
        });
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Adjoint of [`conv2d_forward`]. The input gradient is skipped when
/// `need_input` is false.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let os = grad_out.shape();
    let k = ws.h;
    let kdim = ws.c * k * k;
    let hw = os.plane();
    let in_per = xs.c * xs.plane();
    let out_per = os.c * hw;
    let w = weight.data();

    let mut grad_in = need_input.then(|| Tensor::zeros(xs));
    if use_fast_path::<T>(k, pad) {
        return fast_backward(x, weight, grad_out, grad_in);
    }
    let per_sample: Vec<(Vec<T>, Vec<T>)> = {
        let work = |(xi, gy): (&[T], &[T]), gx: Option<&mut [T]>| {
            let mut buf;
            let cols: &[T] = if direct_columns(k, pad) {
                xi
            } else {
                buf = vec![T::zero(); kdim * hw];
                im2col(xi, xs, k, pad, os.h, os.w, &mut buf);
                &buf
            };
            let mut gw = vec![T::zero(); ws.n * kdim];
            // gw = gy * cols^T
            T::gemm(
                ws.n,
                hw,
                kdim,
                T::one(),
                gy,
                (hw as isize, 1),
                cols,
                (1, hw as isize),
                T::zero(),
                &mut gw,
                (kdim as isize, 1),
            );
            let gb: Vec<T> = gy
                .chunks(hw)
                .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
                .collect();
            if let Some(gx) = gx {
                // gcols = w^T * gy
                if direct_columns(k, pad) {
                    T::gemm(
                        kdim,
                        ws.n,
                        hw,
                        T::one(),
                        w,
                        (1, kdim as isize),
                        gy,
                        (hw as isize, 1),
                        T::zero(),
                        gx,
                        (hw as isize, 1),
                    );
                } else {
                    let mut gcols = vec![T::zero(); kdim * hw];
                    T::gemm(
                        kdim,
                        ws.n,
                        hw,
                        T::one(),
                        w,
                        (1, kdim as isize),
                        gy,
                        (hw as isize, 1),
                        T::zero(),
                        &mut gcols,
                        (hw as isize, 1),
                    );
                    col2im(&gcols, xs, k, pad, os.h, os.w, gx);
                }
            }
            (gw, gb)
        };
        let pairs = x.data().par_chunks(in_per).zip(grad_out.data().par_chunks(out_per));
        match grad_in.as_mut() {
            Some(gi) => pairs
                .zip(gi.data_mut().par_chunks_mut(in_per))
                .map(|(p, gx)| work(p, Some(gx)))
                .collect(),
            None => pairs.map(|p| work(p, None)).collect(),
        }
    };

    // Fixed-order reduction across samples keeps results reproducible.
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
    for (w_i, b_i) in &per_sample {
        for (a, &v) in gw.data_mut().iter_mut().zip(w_i) {
            *a = *a + v;
        }
        for (a, &v) in gb.data_mut().iter_mut().zip(b_i) {
            *a = *a + v;
        }
    }
    ConvGrads {
        input: grad_in,
        weight: gw,
        bias: gb,
    }
}

fn fast_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    mut grad_in: Option<Tensor<T>>,
) -> ConvGrads<T> {
    let (xs, ws, os) = (x.shape(), weight.shape(), grad_out.shape());
    let (in_per, out_per) = (xs.c * xs.plane(), os.c * os.plane());
    let wf = as_f32(weight.data()).expect("f32");
    let xf = as_f32(x.data()).expect("f32");
    let gf = as_f32(grad_out.data()).expect("f32");
    let adjoint = grad_in
        .is_some()
        .then(|| fastconv::PackedWeights::adjoint(wf, ws.n, ws.c));
    let work = |(xi, gy): (&[f32], &[f32])| {
        let mut gw = vec![0.0f32; ws.len()];
        let mut gb = vec![0.0f32; ws.n];
        fastconv::weight_grad_sample(xi, gy, xs.h, xs.w, ws.c, ws.n, &mut gw, &mut gb);
        (gw, gb)
    };
    let per_sample: Vec<(Vec<f32>, Vec<f32>)> = xf.par_chunks(in_per).zip(gf.par_chunks(out_per)).map(work).collect();
    if let (Some(gi), Some(pw)) = (grad_in.as_mut(), adjoint.as_ref()) {
        as_f32_mut(gi.data_mut())
            .expect("f32")
            .par_chunks_mut(in_per)
            .zip(gf.par_chunks(out_per))
            .for_each(|(gx, gy)| fastconv::forward_sample(gy, xs.h, xs.w, pw, None, gx));
    }
    let mut gw = Tensor::<T>::zeros(ws);
    let mut gb = Tensor::<T>::zeros(Shape::new(1, ws.n, 1, 1));
    {
        let (gwf, gbf) = (
            as_f32_mut(gw.data_mut()).expect("f32"),
            as_f32_mut(gb.data_mut()).expect("f32"),
        );
        for (w_i, b_i) in &per_sample {
            gwf.iter_mut().zip(w_i).for_each(|(a, v)| *a += v);
            gbf.iter_mut().zip(b_i).for_each(|(a, v)| *a += v);
        }
    }
    ConvGrads {
        input: grad_in,
        weight: gw,
        bias: gb,
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU adjoint; the derivative at exactly zero is taken as zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    x.zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() })
        .expect("relu grad shape")
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Mirror padding that does not repeat the edge pixel.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if pad >= s.h.min(s.w) {
        return arg_err(format!(
            "reflect_pad: pad {pad} must be smaller than min(h, w) = {}",
            s.h.min(s.w)
        ));
    }
    let os = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::zeros(os);
    let p = pad as isize;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..os.h {
                let sy = reflect_index(y as isize - p, s.h);
                for xx in 0..os.w {
                    let sx = reflect_index(xx as isize - p, s.w);
                    dst[y * os.w + xx] = src[sy * s.w + sx];
                }
            }
        }
    }
    Ok(out)
}

pub fn reflect_pad_backward<T: Real>(grad: &Tensor<T>, input_shape: Shape, pad: usize) -> Tensor<T> {
    let s = input_shape;
    let gs = grad.shape();
    let mut out = Tensor::zeros(s);
    let p = pad as isize;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..gs.h {
                let sy = reflect_index(y as isize - p, s.h);
                for xx in 0..gs.w {
                    let sx = reflect_index(xx as isize - p, s.w);
                    dst[sy * s.w + sx] = dst[sy * s.w + sx] + src[y * gs.w + xx];
                }
            }
        }
    }
    out
}

/// Removes `pad` pixels from every side.
pub fn center_crop<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if 2 * pad >= s.h || 2 * pad >= s.w {
        return arg_err(format!("center_crop: pad {pad} too large for {s}"));
    }
    x.crop(pad, pad, s.h - 2 * pad, s.w - 2 * pad)
}

pub fn center_crop_backward<T: Real>(grad: &Tensor<T>, input_shape: Shape, pad: usize) -> Tensor<T> {
    let gs = grad.shape();
    let mut out = Tensor::zeros(input_shape);
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..gs.h {
                let d0 = (y + pad) * input_shape.w + pad;
                dst[d0..d0 + gs.w].copy_from_slice(&src[y * gs.w..(y + 1) * gs.w]);
            }
        }
    }
    out
}

/// Per-sample, per-channel spatial mean, shaped `(n, c, 1, 1)`.
pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f64;
    let data = x
        .data()
        .chunks(s.plane().max(1))
        .map(|p| T::from_f64_lossy(p.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("channel mean shape")
}

pub fn channel_mean_backward<T: Real>(grad: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let inv = T::from_f64_lossy(1.0 / input_shape.plane() as f64);
    let mut out = Tensor::zeros(input_shape);
    for (plane, &g) in out.data_mut().chunks_mut(input_shape.plane()).zip(grad.data()) {
        plane.fill(g * inv);
    }
    out
}

/// Subtracts the per-sample, per-channel spatial mean.
pub fn center<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let means = channel_mean(x);
    let mut out = x.clone();
    for (plane, &m) in out.data_mut().chunks_mut(s.plane()).zip(means.data()) {
        for v in plane {
            *v = *v - m;
        }
    }
    out
}

/// The centering map is a self-adjoint projection.
pub fn center_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    center(grad)
}

/// `max(x, POW_EPS)^gamma`.
pub fn pow_safe<T: Real>(x: &Tensor<T>, gamma: f64) -> Tensor<T> {
    let eps = T::from_f64_lossy(POW_EPS);
    if gamma == 1.0 {
        return x.map(|v| v.max(eps));
    }
    let g = T::from_f64_lossy(gamma);
    x.map(|v| v.max(eps).powf(g))
}

/// Derivative of [`pow_safe`]: zero wherever the floor is active.
pub fn pow_safe_backward<T: Real>(x: &Tensor<T>, gamma: f64, grad: &Tensor<T>) -> Tensor<T> {
    let eps = T::from_f64_lossy(POW_EPS);
    let g = T::from_f64_lossy(gamma);
    let gm1 = T::from_f64_lossy(gamma - 1.0);
    x.zip_map(grad, |v, d| {
        if v > eps {
            if gamma == 1.0 {
                d
            } else {
                d * g * v.powf(gm1)
            }
        } else {
            T::zero()
        }
    })
    .expect("pow grad shape")
}

/// Mean over every `k x k` window; output is `(h-k+1, w-k+1)`.
pub fn box_mean<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h < k || s.w < k {
        return arg_err(format!("box_mean: image {}x{} smaller than window {k}", s.h, s.w));
    }
    let (ho, wo) = (s.h - k + 1, s.w - k + 1);
    let os = Shape::new(s.n, s.c, ho, wo);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        let row = &src[(y + dy) * s.w + xx..(y + dy) * s.w + xx + k];
                        acc += row.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    dst[y * wo + xx] = T::from_f64_lossy(acc * inv);
                }
            }
        }
    }
    Ok(out)
}

pub fn box_mean_backward<T: Real>(grad: &Tensor<T>, input_shape: Shape, k: usize) -> Tensor<T> {
    let gs = grad.shape();
    let s = input_shape;
    let inv = T::from_f64_lossy(1.0 / (k * k) as f64);
    let mut out = Tensor::zeros(s);
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..gs.h {
                for xx in 0..gs.w {
                    let g = src[y * gs.w + xx] * inv;
                    for dy in 0..k {
                        for d in &mut dst[(y + dy) * s.w + xx..(y + dy) * s.w + xx + k] {
                            *d = *d + g;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let os = Shape::new(xs.n, ws.n, xs.h + 2 * pad - ws.h + 1, xs.w + 2 * pad - ws.w + 1);
        Tensor::from_fn(os, |n, o, y, xx| {
            let mut acc = b.data()[o];
            for c in 0..xs.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = y as isize + ky as isize - pad as isize;
                        let ix = xx as isize + kx as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn all_ones_three_by_three_sums_to_nine() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 1.0);
        let layer = ConvLayer::new(
            Tensor::full(Shape::new(1, 1, 3, 3), 1.0),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
            0,
        )
        .unwrap();
        let y = conv2d(&x, &layer).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel_is_bit_exact() {
        let x = random(Shape::new(2, 3, 7, 5), 1).cast::<f32>();
        let mut w = Tensor::zeros(Shape::new(3, 3, 3, 3));
        for c in 0..3 {
            w.set(c, c, 1, 1, 1.0);
        }
        let layer = ConvLayer::new(w, Tensor::zeros(Shape::new(1, 3, 1, 1)), 1).unwrap();
        let y = conv2d(&x, &layer).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let w = random(Shape::new(3, 2, 3, 3), 2);
        let b = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.5, -1.0, 2.0]).unwrap();
        let layer = ConvLayer::new(w, b, 1).unwrap();
        let y = conv2d(&x, &layer).unwrap();
        for o in 0..3 {
            assert!(y.plane(0, o).iter().all(|&v| v == layer.bias.data()[o]));
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = random(Shape::new(2, 3, 6, 5), 3);
        for (k, pad) in [(3, 1), (3, 0), (1, 0), (1, 1)] {
            let w = random(Shape::new(4, 3, k, k), 4);
            let b = random(Shape::new(1, 4, 1, 1), 5);
            let fast = conv2d_forward(&x, &w, &b, pad).unwrap();
            let slow = naive_conv(&x, &w, &b, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} pad={pad}");
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x), gy> must equal <x, dx> + <w, dw> + <b, db> for a linear map.
        let x = random(Shape::new(2, 3, 5, 6), 6);
        for (k, pad) in [(3, 1), (1, 0), (3, 0)] {
            let w = random(Shape::new(4, 3, k, k), 7);
            let zero_b = Tensor::zeros(Shape::new(1, 4, 1, 1));
            let y = conv2d_forward(&x, &w, &zero_b, pad).unwrap();
            let gy = random(y.shape(), 8);
            let g = conv2d_backward(&x, &w, pad, &gy, true);
            let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x
                .data()
                .iter()
                .zip(g.input.as_ref().unwrap().data())
                .map(|(a, b)| a * b)
                .sum();
            let via_w: f64 = w.data().iter().zip(g.weight.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10, "input adjoint k={k}");
            assert!((lhs - via_w).abs() < 1e-10, "weight adjoint k={k}");
            let sum_gy: Vec<f64> = (0..4)
                .map(|o| (0..2).map(|n| gy.plane(n, o).iter().sum::<f64>()).sum())
                .collect();
            for (a, b) in g.bias.data().iter().zip(&sum_gy) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_nan() {
        let layer = ConvLayer::<f32>::zeros(2, 3, 3, 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        assert!(matches!(conv2d(&x, &layer), Err(crate::Error::Dimension(_))));
        let mut x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        x.set(0, 1, 2, 2, f32::INFINITY);
        assert!(matches!(conv2d(&x, &layer), Err(crate::Error::Numeric(_))));
        assert!(ConvLayer::<f32>::zeros(2, 3, 5, 2).is_err());
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0f64, 0.0, 2.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.5]);
        let g = relu_backward(&x, &Tensor::full(x.shape(), 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn reflect_pad_row_example() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 3), vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&x, 1).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 1, 4, 5));
        // middle rows correspond to the original rows [a, b, c] -> [b, a, b, c, b]
        assert_eq!(&p.plane(0, 0)[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&p.plane(0, 0)[10..15], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        // first padded row mirrors row 1
        assert_eq!(&p.plane(0, 0)[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        assert_eq!(reflect_pad(&x, 0).unwrap(), x);
        assert!(reflect_pad(&x, 2).is_err());
    }

    #[test]
    fn box_mean_of_constant_is_constant() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 8, 7), 0.3);
        let m = box_mean(&x, 6).unwrap();
        assert_eq!(m.shape(), Shape::new(1, 2, 3, 2));
        assert!(m.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn pow_safe_examples() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.25f64, 1.0, -0.3]).unwrap();
        let half = pow_safe(&x, 0.5);
        assert!((half.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(half.data()[1], 1.0);
        assert!((pow_safe(&x, 2.7).data()[1] - 1.0).abs() < 1e-15);
        assert_eq!(pow_safe(&x, 1.0).data()[2], 1e-4);
    }

    #[test]
    fn center_examples() {
        let c = Tensor::<f64>::full(Shape::new(2, 3, 4, 4), 0.7);
        assert!(center(&c).data().iter().all(|&v| v.abs() < 1e-15));
        let x = random(Shape::new(2, 3, 5, 5), 9);
        let once = center(&x);
        let twice = center(&once);
        assert!(once.max_abs_diff(&twice) < 1e-12);
        let m = channel_mean(&once);
        assert!(m.data().iter().all(|v| v.abs() < 1e-12));
    }
}
