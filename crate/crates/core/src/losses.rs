//! Self-supervised objectives for the decomposition network.
//!
//! All squared norms are means of squared entries, so loss magnitudes do not
//! depend on crop or batch size. Cyclic terms re-feed first-pass outputs
//! through the same network; gradients flow through both passes unless
//! [`LossConfig::detach_second_pass`] is set.

use crate::augmentation::AugCombo;
use crate::error::{arg_err, Result};
use crate::network::{Decomposer, DecompositionVars};
use crate::noise::{compose_on_tape, Sign};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Side of the dense variance windows.
pub const VARIANCE_PATCH: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda_aug: f64,
    pub combos: Vec<AugCombo>,
    pub detach_second_pass: bool,
    pub patch: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_aug: 0.1,
            combos: crate::augmentation::enumerate_combos(true, true),
            detach_second_pass: false,
            patch: VARIANCE_PATCH,
        }
    }
}

/// Scalar value of every term of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub con: f64,
    pub id: f64,
    pub zero: f64,
    pub reg: f64,
    pub aug: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(name, value)` pairs in log order.
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("con", self.con),
            ("id", self.id),
            ("zero", self.zero),
            ("reg", self.reg),
            ("aug", self.aug),
            ("total", self.total),
        ]
    }

    pub const CSV_HEADER: &'static str = "step,con,id,zero,reg,aug,total,lr";

    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        format!(
            "{step},{:e},{:e},{:e},{:e},{:e},{:e},{lr:e}",
            self.con, self.id, self.zero, self.reg, self.aug, self.total
        )
    }
}

/// Tape handles of every term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub con: Var,
    pub id: Var,
    pub zero: Var,
    pub reg: Var,
    pub aug: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown {
            con: v(self.con),
            id: v(self.id),
            zero: v(self.zero),
            reg: v(self.reg),
            aug: self.aug.map(v).unwrap_or(0.0),
            total: v(self.total),
        }
    }
}

fn refeed<T: Real>(tape: &mut Tape<T>, v: Var, detach: bool) -> Var {
    if detach {
        tape.detach(v)
    } else {
        v
    }
}

/// `||noisy - g(f(noisy))||^2`, returning the first-pass decomposition too.
pub fn consistency_loss<T: Real, F: Decomposer<T>>(
    tape: &mut Tape<T>,
    f: &F,
    noisy: Var,
    gamma: f64,
) -> Result<(Var, DecompositionVars)> {
    let dec = f.decompose(tape, noisy)?;
    let recon = compose_on_tape(tape, dec.clean, dec.dep, Some(dec.indep), Sign::Pos, Sign::Pos, gamma)?;
    Ok((tape.mse(noisy, recon)?, dec))
}

/// Second-pass decompositions shared by the identity and zero losses.
#[derive(Clone, Copy, Debug)]
pub struct SecondPasses {
    /// `clean + clean^gamma * dep`.
    pub dep_only: Var,
    pub of_clean: DecompositionVars,
    pub of_dep_only: DecompositionVars,
    pub of_indep: DecompositionVars,
}

pub fn second_passes<T: Real, F: Decomposer<T>>(
    tape: &mut Tape<T>,
    f: &F,
    dec: &DecompositionVars,
    gamma: f64,
    detach: bool,
) -> Result<SecondPasses> {
    let dep_only = compose_on_tape(tape, dec.clean, dec.dep, None, Sign::Pos, Sign::Zero, gamma)?;
    let clean_in = refeed(tape, dec.clean, detach);
    let dep_in = refeed(tape, dep_only, detach);
    let indep_in = refeed(tape, dec.indep, detach);
    Ok(SecondPasses {
        dep_only,
        of_clean: f.decompose(tape, clean_in)?,
        of_dep_only: f.decompose(tape, dep_in)?,
        of_indep: f.decompose(tape, indep_in)?,
    })
}

/// Outputs that must reproduce the first-pass components.
pub fn identity_terms<T: Real>(tape: &mut Tape<T>, dec: &DecompositionVars, sp: &SecondPasses) -> Result<Var> {
    let terms = [
        tape.mse(dec.clean, sp.of_clean.clean)?,
        tape.mse(dec.clean, sp.of_dep_only.clean)?,
        tape.mse(dec.dep, sp.of_dep_only.dep)?,
        tape.mse(dec.indep, sp.of_indep.indep)?,
    ];
    tape.sum_all(&terms)
}

/// Outputs that must vanish. The dependent output of `f(indep)` is free.
pub fn zero_terms<T: Real>(tape: &mut Tape<T>, sp: &SecondPasses) -> Result<Var> {
    let terms = [
        tape.mean_square(sp.of_clean.dep),
        tape.mean_square(sp.of_clean.indep),
        tape.mean_square(sp.of_indep.clean),
        tape.mean_square(sp.of_dep_only.indep),
    ];
    tape.sum_all(&terms)
}

pub fn identity_loss<T: Real, F: Decomposer<T>>(
    tape: &mut Tape<T>,
    f: &F,
    dec: &DecompositionVars,
    gamma: f64,
    detach: bool,
) -> Result<Var> {
    let sp = second_passes(tape, f, dec, gamma, detach)?;
    identity_terms(tape, dec, &sp)
}

pub fn zero_loss<T: Real, F: Decomposer<T>>(
    tape: &mut Tape<T>,
    f: &F,
    dec: &DecompositionVars,
    gamma: f64,
    detach: bool,
) -> Result<Var> {
    let sp = second_passes(tape, f, dec, gamma, detach)?;
    zero_terms(tape, &sp)
}

/// Biased variance of every dense `patch x patch` window, per channel.
/// Output is `(n, c, h - patch + 1, w - patch + 1)`.
pub fn local_variance<T: Real>(noisy: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = noisy.shape();
    if patch == 0 || s.h < patch || s.w < patch {
        return arg_err(format!(
            "local_variance: image {}x{} smaller than {patch}x{patch} patch",
            s.h, s.w
        ));
    }
    let (ho, wo) = (s.h - patch + 1, s.w - patch + 1);
    let m = (patch * patch) as f64;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = noisy.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                for x in 0..wo {
                    let window = (0..patch).flat_map(|dy| src[(y + dy) * s.w + x..(y + dy) * s.w + x + patch].iter());
                    let mean = window.clone().map(|v| v.as_f64()).sum::<f64>() / m;
                    let var = window.map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
                    dst[y * wo + x] = T::from_f64_lossy(var);
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel statistics entering the variance regularizer, each `(n, c, 1, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct VarianceEstimate {
    /// Sum over windows of the noisy input's local variance (constant).
    pub patch_var_sum: Var,
    /// Sum over windows of `C_j^(2 gamma)`, `C_j` the local mean of the clean estimate.
    pub clean_power_sum: Var,
    pub sigma_d_sq: Var,
    pub sigma_i_sq: Var,
    /// Number of windows per channel.
    pub windows: usize,
}

fn global_variance<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.center(x);
    let sq = tape.mul(c, c)?;
    Ok(tape.channel_mean(sq))
}

pub fn variance_estimate<T: Real>(
    tape: &mut Tape<T>,
    noisy: &Tensor<T>,
    dec: &DecompositionVars,
    gamma: f64,
    patch: usize,
) -> Result<VarianceEstimate> {
    let pv = local_variance(noisy, patch)?;
    let windows = pv.shape().plane();
    let pv_sum = crate::kernels::channel_mean(&pv).scale(T::from_f64_lossy(windows as f64));
    let patch_var_sum = tape.constant(pv_sum);
    let local_means = tape.box_mean(dec.clean, patch)?;
    let powered = tape.pow_safe(local_means, 2.0 * gamma);
    let mean_power = tape.channel_mean(powered);
    let clean_power_sum = tape.scale(mean_power, windows as f64);
    Ok(VarianceEstimate {
        patch_var_sum,
        clean_power_sum,
        sigma_d_sq: global_variance(tape, dec.dep)?,
        sigma_i_sq: global_variance(tape, dec.indep)?,
        windows,
    })
}

/// Per-channel aggregated residual
/// `sum_j Var(noisy_j) - sigma_d^2 sum_j C_j^(2 gamma) - M sigma_i^2`.
pub fn variance_residual<T: Real>(tape: &mut Tape<T>, est: &VarianceEstimate) -> Result<Var> {
    let dep_part = tape.mul(est.clean_power_sum, est.sigma_d_sq)?;
    let indep_part = tape.scale(est.sigma_i_sq, est.windows as f64);
    let r = tape.sub(est.patch_var_sum, dep_part)?;
    tape.sub(r, indep_part)
}

/// `(1/M) * residual^2`, averaged over samples and channels.
pub fn regularization_loss<T: Real>(
    tape: &mut Tape<T>,
    noisy: &Tensor<T>,
    dec: &DecompositionVars,
    gamma: f64,
    patch: usize,
) -> Result<Var> {
    let est = variance_estimate(tape, noisy, dec, gamma, patch)?;
    let residual = variance_residual(tape, &est)?;
    let ms = tape.mean_square(residual);
    Ok(tape.scale(ms, 1.0 / est.windows as f64))
}

/// Mean over combos of the re-decomposition error of each recombination.
pub fn augmentation_loss<T: Real, F: Decomposer<T>>(
    tape: &mut Tape<T>,
    f: &F,
    dec: &DecompositionVars,
    combos: &[AugCombo],
    gamma: f64,
    detach: bool,
) -> Result<Var> {
    if combos.is_empty() {
        return arg_err("augmentation_loss: no augmentation combos enabled");
    }
    let mut per_combo = Vec::with_capacity(combos.len());
    for c in combos {
        let input = compose_on_tape(tape, dec.clean, dec.dep, Some(dec.indep), c.s2, c.s3, gamma)?;
        let input = refeed(tape, input, detach);
        let out = f.decompose(tape, input)?;
        let dep_target = signed(tape, dec.dep, c.s2);
        let indep_target = signed(tape, dec.indep, c.s3);
        let terms = [
            tape.mse(out.clean, dec.clean)?,
            mse_to(tape, out.dep, dep_target)?,
            mse_to(tape, out.indep, indep_target)?,
        ];
        per_combo.push(tape.sum_all(&terms)?);
    }
    let sum = tape.sum_all(&per_combo)?;
    Ok(tape.scale(sum, 1.0 / combos.len() as f64))
}

fn signed<T: Real>(tape: &mut Tape<T>, v: Var, s: Sign) -> Option<Var> {
    match s {
        Sign::Pos => Some(v),
        Sign::Neg => Some(tape.scale(v, -1.0)),
        Sign::Zero => None,
    }
}

fn mse_to<T: Real>(tape: &mut Tape<T>, out: Var, target: Option<Var>) -> Result<Var> {
    match target {
        Some(t) => tape.mse(out, t),
        None => Ok(tape.mean_square(out)),
    }
}

/// Records every term and the weighted total. The augmentation term is
/// skipped when `lambda_aug` is zero or no combos are enabled.
pub fn total_loss<T: Real, F: Decomposer<T>>(
    tape: &mut Tape<T>,
    f: &F,
    noisy: Var,
    cfg: &LossConfig,
) -> Result<(LossVars, DecompositionVars)> {
    let noisy_value = tape.value(noisy).clone();
    let (con, dec) = consistency_loss(tape, f, noisy, cfg.gamma)?;
    let sp = second_passes(tape, f, &dec, cfg.gamma, cfg.detach_second_pass)?;
    let id = identity_terms(tape, &dec, &sp)?;
    let zero = zero_terms(tape, &sp)?;
    let reg = regularization_loss(tape, &noisy_value, &dec, cfg.gamma, cfg.patch)?;
    let mut total = tape.sum_all(&[con, id, zero, reg])?;
    let aug = if cfg.lambda_aug != 0.0 && !cfg.combos.is_empty() {
        let aug = augmentation_loss(tape, f, &dec, &cfg.combos, cfg.gamma, cfg.detach_second_pass)?;
        let weighted = tape.scale(aug, cfg.lambda_aug);
        total = tape.add(total, weighted)?;
        Some(aug)
    } else {
        None
    };
    Ok((
        LossVars {
            con,
            id,
            zero,
            reg,
            aug,
            total,
        },
        dec,
    ))
}
