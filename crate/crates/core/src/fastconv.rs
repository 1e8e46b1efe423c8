//! Direct 3x3, padding-1 convolution for `f32` on CPUs with AVX-512.
//!
//! Each sample is copied into a zero-bordered buffer of row width `w + 2`.
//! In that layout every kernel tap is a constant offset, so one output row
//! segment is a sum of shifted input segments and no column matrix is built.
//! Outputs are produced in the same padded-width layout and the two junk
//! columns per row are dropped on copy-out.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

const LANES: usize = 16;
/// Output channels per register block.
const OB: usize = 8;
/// Vectors per register block along the pixel axis.
const VB: usize = 3;
const PIX: usize = LANES * VB;
const TAPS: usize = 9;

pub(crate) fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx512f")
            && std::arch::is_x86_feature_detected!("avx512vl")
            && std::arch::is_x86_feature_detected!("avx512bw")
            && std::arch::is_x86_feature_detected!("avx512dq")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

struct Geometry {
    h: usize,
    w: usize,
    /// Padded row width.
    wp: usize,
    plane: usize,
    /// Padded-width pixels that carry real outputs, junk columns included.
    q: usize,
    /// `q` rounded up to whole register blocks.
    qr: usize,
}

impl Geometry {
    fn new(h: usize, w: usize) -> Self {
        let wp = w + 2;
        let q = h * wp;
        Self {
            h,
            w,
            wp,
            plane: (h + 2) * wp,
            q,
            qr: q.div_ceil(PIX) * PIX,
        }
    }

    fn offsets(&self) -> [usize; TAPS] {
        std::array::from_fn(|t| (t / 3) * self.wp + t % 3)
    }

    /// Zero-bordered copy of a `(c, h, w)` sample with enough trailing
    /// slack that block loads past the last real pixel stay in bounds.
    fn pad(&self, x: &[f32], c: usize) -> Vec<f32> {
        let mut xp = vec![0.0f32; c * self.plane + self.qr + 2 * self.wp + 2 + LANES];
        for ch in 0..c {
            for y in 0..self.h {
                let src = &x[(ch * self.h + y) * self.w..][..self.w];
                xp[ch * self.plane + (y + 1) * self.wp + 1..][..self.w].copy_from_slice(src);
            }
        }
        xp
    }
}

/// Weights regrouped as `[out block][in][tap][OB]`, zero-filled past `out_c`.
pub(crate) struct PackedWeights {
    data: Vec<f32>,
    out_c: usize,
    in_c: usize,
}

impl PackedWeights {
    /// Packs `(out_c, in_c, 3, 3)` weights for a forward convolution.
    pub(crate) fn forward(w: &[f32], out_c: usize, in_c: usize) -> Self {
        Self::pack(out_c, in_c, |o, i, t| w[(o * in_c + i) * TAPS + t])
    }

    /// Packs the adjoint kernel: channels swapped and taps mirrored, so the
    /// forward routine applied to an output gradient yields the input
    /// gradient.
    pub(crate) fn adjoint(w: &[f32], out_c: usize, in_c: usize) -> Self {
        Self::pack(in_c, out_c, |i, o, t| w[(o * in_c + i) * TAPS + (TAPS - 1 - t)])
    }

    fn pack(out_c: usize, in_c: usize, get: impl Fn(usize, usize, usize) -> f32) -> Self {
        let blocks = out_c.div_ceil(OB);
        let mut data = vec![0.0f32; blocks * in_c * TAPS * OB];
        for o in 0..out_c {
            let (b, lane) = (o / OB, o % OB);
            for i in 0..in_c {
                for t in 0..TAPS {
                    data[((b * in_c + i) * TAPS + t) * OB + lane] = get(o, i, t);
                }
            }
        }
        Self { data, out_c, in_c }
    }
}

/// One sample: `out (out_c, h, w) = bias + conv(x (in_c, h, w))`.
pub(crate) fn forward_sample(x: &[f32], h: usize, w: usize, pw: &PackedWeights, bias: Option<&[f32]>, out: &mut [f32]) {
    let g = Geometry::new(h, w);
    let xp = g.pad(x, pw.in_c);
    forward_padded(&g, &xp, pw, bias, out);
}

fn forward_padded(g: &Geometry, xp: &[f32], pw: &PackedWeights, bias: Option<&[f32]>, out: &mut [f32]) {
    let blocks = pw.out_c.div_ceil(OB);
    let offs = g.offsets();
    let mut ybuf = vec![0.0f32; OB * g.qr];
    let last_q0 = (g.qr.max(1) - 1) / PIX * PIX;
    assert!((pw.in_c - 1) * g.plane + last_q0 + offs[TAPS - 1] + PIX <= xp.len());
    for b in 0..blocks {
        let b8: [f32; OB] = std::array::from_fn(|l| {
            let o = b * OB + l;
            match bias {
                Some(bias) if o < pw.out_c => bias[o],
                _ => 0.0,
            }
        });
        let wb = &pw.data[b * pw.in_c * TAPS * OB..][..pw.in_c * TAPS * OB];
        for q0 in (0..g.qr).step_by(PIX) {
            // SAFETY: `available()` gated every caller; the padded buffer
            // slack covers the furthest block load, asserted above.
            unsafe {
                block_kernel(
                    xp.as_ptr(),
                    g.plane,
                    pw.in_c,
                    &offs,
                    wb.as_ptr(),
                    b8,
                    q0,
                    ybuf.as_mut_ptr(),
                    g.qr,
                )
            };
        }
        for l in 0..OB.min(pw.out_c - b * OB) {
            let o = b * OB + l;
            for y in 0..g.h {
                out[(o * g.h + y) * g.w..][..g.w].copy_from_slice(&ybuf[l * g.qr + y * g.wp..][..g.w]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vl,avx512bw,avx512dq")]
#[allow(clippy::too_many_arguments)]
unsafe fn block_kernel(
    xp: *const f32,
    plane: usize,
    in_c: usize,
    offs: &[usize; TAPS],
    wb: *const f32,
    bias: [f32; OB],
    q0: usize,
    ybuf: *mut f32,
    qr: usize,
) {
    let mut acc = [[_mm512_setzero_ps(); VB]; OB];
    for (l, row) in acc.iter_mut().enumerate() {
        *row = [_mm512_set1_ps(bias[l]); VB];
    }
    for ic in 0..in_c {
        let xb = xp.add(ic * plane + q0);
        let wi = wb.add(ic * TAPS * OB);
        for (t, &off) in offs.iter().enumerate() {
            let p = xb.add(off);
            let xv = [
                _mm512_loadu_ps(p),
                _mm512_loadu_ps(p.add(LANES)),
                _mm512_loadu_ps(p.add(2 * LANES)),
            ];
            let wt = wi.add(t * OB);
            for (l, row) in acc.iter_mut().enumerate() {
                let wv = _mm512_set1_ps(*wt.add(l));
                for v in 0..VB {
                    row[v] = _mm512_fmadd_ps(wv, xv[v], row[v]);
                }
            }
        }
    }
    for (l, row) in acc.iter().enumerate() {
        for (v, r) in row.iter().enumerate() {
            _mm512_storeu_ps(ybuf.add(l * qr + q0 + v * LANES), *r);
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
#[allow(clippy::too_many_arguments)]
unsafe fn block_kernel(
    _: *const f32,
    _: usize,
    _: usize,
    _: &[usize; TAPS],
    _: *const f32,
    _: [f32; OB],
    _: usize,
    _: *mut f32,
    _: usize,
) {
    unreachable!("fast convolution used without AVX-512")
}

/// Output channels sharing each input load in the weight-gradient kernel.
const GB: usize = 2;

/// One sample's weight and bias gradients, accumulated into `gw`
/// `(out_c, in_c, 3, 3)` and `gb` `(out_c)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad_sample(
    x: &[f32],
    gy: &[f32],
    h: usize,
    w: usize,
    in_c: usize,
    out_c: usize,
    gw: &mut [f32],
    gb: &mut [f32],
) {
    let g = Geometry::new(h, w);
    let xp = g.pad(x, in_c);
    let qg = g.q.div_ceil(LANES) * LANES;
    let groups = out_c.div_ceil(GB);
    // gradient rows in padded-width layout; junk columns stay zero
    let mut gyp = vec![0.0f32; GB * groups * qg];
    for o in 0..out_c {
        let rows = &gy[o * h * w..][..h * w];
        gb[o] += rows.iter().sum::<f32>();
        for y in 0..h {
            gyp[o * qg + y * g.wp..][..w].copy_from_slice(&rows[y * w..][..w]);
        }
    }
    let offs = g.offsets();
    let mut sums = [[0.0f32; TAPS]; GB];
    for p in 0..groups {
        for ic in 0..in_c {
            // SAFETY: `available()` gated every caller; `qg <= qr` so the
            // pad slack covers every load.
            unsafe {
                wgrad_kernel(
                    xp.as_ptr().add(ic * g.plane),
                    &offs,
                    gyp.as_ptr().add(GB * p * qg),
                    qg,
                    &mut sums,
                )
            };
            for (k, s) in sums.iter().enumerate() {
                let o = GB * p + k;
                if o < out_c {
                    for (t, &v) in s.iter().enumerate() {
                        gw[(o * in_c + ic) * TAPS + t] += v;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vl,avx512bw,avx512dq")]
unsafe fn wgrad_kernel(x: *const f32, offs: &[usize; TAPS], gy: *const f32, qg: usize, out: &mut [[f32; TAPS]; GB]) {
    let mut acc = [[_mm512_setzero_ps(); TAPS]; GB];
    for q in (0..qg).step_by(LANES) {
        let gv: [__m512; GB] = std::array::from_fn(|k| _mm512_loadu_ps(gy.add(k * qg + q)));
        for t in 0..TAPS {
            let xv = _mm512_loadu_ps(x.add(q + offs[t]));
            for k in 0..GB {
                acc[k][t] = _mm512_fmadd_ps(gv[k], xv, acc[k][t]);
            }
        }
    }
    for k in 0..GB {
        for t in 0..TAPS {
            out[k][t] = _mm512_reduce_add_ps(acc[k][t]);
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn wgrad_kernel(_: *const f32, _: &[usize; TAPS], _: *const f32, _: usize, _: &mut [[f32; TAPS]; GB]) {
    unreachable!("fast convolution used without AVX-512")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Nested-loop reference in f64.
    fn naive(x: &[f32], wt: &[f32], bias: &[f32], ci: usize, co: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; co * h * w];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias[o] as f64;
                    for i in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wt[((o * ci + i) * 3 + ky) * 3 + kx] as f64
                                        * x[(i * h + iy as usize) * w + ix as usize] as f64;
                                }
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn forward_adjoint_and_weight_grad_match_reference() {
        if !available() {
            return;
        }
        for &(ci, co, h, w) in &[(3usize, 16usize, 7usize, 9usize), (16, 16, 13, 5), (5, 3, 4, 31)] {
            let x = rand_vec(ci * h * w, 1);
            let wt = rand_vec(co * ci * 9, 2);
            let bias = rand_vec(co, 3);
            let mut out = vec![0.0; co * h * w];
            forward_sample(&x, h, w, &PackedWeights::forward(&wt, co, ci), Some(&bias), &mut out);
            let reference = naive(&x, &wt, &bias, ci, co, h, w);
            for (a, b) in out.iter().zip(&reference) {
                assert!((*a as f64 - b).abs() < 1e-4, "forward {a} vs {b}");
            }

            // <conv(x), g> = <x, conv_adjoint(g)> and = sum(w * dL/dw) + sum(b * dL/db)
            let gy = rand_vec(co * h * w, 4);
            let mut gx = vec![0.0; ci * h * w];
            forward_sample(&gy, h, w, &PackedWeights::adjoint(&wt, co, ci), None, &mut gx);
            let zero_bias = vec![0.0; co];
            let lin = naive(&x, &wt, &zero_bias, ci, co, h, w);
            let lhs: f64 = lin.iter().zip(&gy).map(|(a, &b)| a * b as f64).sum();
            let rhs: f64 = x.iter().zip(&gx).map(|(&a, &b)| a as f64 * b as f64).sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");

            let mut gw = vec![0.0; co * ci * 9];
            let mut gb = vec![0.0; co];
            weight_grad_sample(&x, &gy, h, w, ci, co, &mut gw, &mut gb);
            let via_w: f64 = gw.iter().zip(&wt).map(|(&a, &b)| a as f64 * b as f64).sum();
            assert!((lhs - via_w).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {via_w}");
            for o in 0..co {
                let s: f64 = gy[o * h * w..(o + 1) * h * w].iter().map(|&v| v as f64).sum();
                assert!((gb[o] as f64 - s).abs() < 1e-3);
            }
        }
    }
}
