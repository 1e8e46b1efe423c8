//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use cvf_sid::losses::{total_loss, LossConfig, LossVars};
use cvf_sid::tape::{Tape, Var};
use cvf_sid::{CvfModel, Preset, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Con,
    Id,
    Zero,
    Reg,
    Aug,
    Total,
}

pub fn pick(vars: &LossVars, term: Term) -> Var {
    match term {
        Term::Con => vars.con,
        Term::Id => vars.id,
        Term::Zero => vars.zero,
        Term::Reg => vars.reg,
        Term::Aug => vars.aug.expect("aug term enabled"),
        Term::Total => vars.total,
    }
}

pub fn uniform(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

pub fn loss_value(model: &CvfModel<f64>, input: &Tensor<f64>, cfg: &LossConfig, term: Term) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(input.clone());
    let (vars, _) = total_loss(&mut tape, &bound, x, cfg).unwrap();
    tape.value(pick(&vars, term)).item()
}

pub fn analytic(model: &CvfModel<f64>, input: &Tensor<f64>, cfg: &LossConfig, term: Term) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(input.clone());
    let (vars, _) = total_loss(&mut tape, &bound, x, cfg).unwrap();
    let grads = tape.backward(pick(&vars, term));
    bound.gradients(&grads)
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: (usize, usize, f64, f64),
}

/// Relative error `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d < 1e-12 {
        0.0
    } else {
        (a - n).abs() / d
    }
}

/// Richardson tableau over a geometric step sequence. `ratio` is the factor
/// by which the leading error term shrinks per level and `noise[i]` the
/// rounding error of `estimates[i]`. Returns the entry with the smallest
/// combined extrapolation and rounding error, and that error.
fn extrapolate(estimates: &[f64], noise: &[f64], ratio: f64) -> (f64, f64) {
    let n = estimates.len();
    let mut table = vec![vec![0.0; n]; n];
    table[0].copy_from_slice(estimates);
    let mut best = (estimates[0], f64::INFINITY);
    for i in 1..n {
        let mut fac = ratio;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= ratio;
            let err = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs())
                + noise[i];
            if err <= best.1 {
                best = (table[j][i], err);
            }
        }
    }
    best
}

/// Derivatives at zero of every component of `f`, by Ridders' extrapolation
/// of finite differences over steps `h0, h0 / 1.6, ...`. Central, forward and
/// backward tableaux share the same evaluations and the most self-consistent
/// one wins per component, so a ReLU kink close to one side of the point
/// does not spoil the estimate.
pub fn ridders<const K: usize>(mut f: impl FnMut(f64) -> [f64; K], h0: f64) -> [f64; K] {
    const CON: f64 = 1.6;
    const LEVELS: usize = 20;
    let f0 = f(0.0);
    let mut evals = Vec::with_capacity(LEVELS);
    let mut h = h0;
    for _ in 0..LEVELS {
        evals.push((h, f(h), f(-h)));
        h /= CON;
    }
    std::array::from_fn(|k| {
        // Each loss evaluation carries a few ulps of accumulated rounding.
        let ulp = 16.0 * f64::EPSILON * f0[k].abs().max(f64::MIN_POSITIVE);
        let noise: Vec<f64> = evals.iter().map(|e| ulp / e.0).collect();
        let central: Vec<f64> = evals.iter().map(|(h, u, d)| (u[k] - d[k]) / (2.0 * h)).collect();
        let forward: Vec<f64> = evals.iter().map(|(h, u, _)| (u[k] - f0[k]) / h).collect();
        let backward: Vec<f64> = evals.iter().map(|(h, _, d)| (f0[k] - d[k]) / h).collect();
        [
            extrapolate(&central, &noise, CON * CON),
            extrapolate(&forward, &noise, CON),
            extrapolate(&backward, &noise, CON),
        ]
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("three tableaux")
        .0
    })
}

/// Values of the five objective terms.
pub fn term_values(model: &CvfModel<f64>, input: &Tensor<f64>, cfg: &LossConfig) -> [f64; 5] {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(input.clone());
    let (vars, _) = total_loss(&mut tape, &bound, x, cfg).unwrap();
    let b = vars.breakdown(&tape);
    [b.con, b.id, b.zero, b.reg, b.aug]
}

/// Weights of the five terms in `term`.
fn term_weights(term: Term, cfg: &LossConfig) -> [f64; 5] {
    match term {
        Term::Con => [1.0, 0.0, 0.0, 0.0, 0.0],
        Term::Id => [0.0, 1.0, 0.0, 0.0, 0.0],
        Term::Zero => [0.0, 0.0, 1.0, 0.0, 0.0],
        Term::Reg => [0.0, 0.0, 0.0, 1.0, 0.0],
        Term::Aug => [0.0, 0.0, 0.0, 0.0, 1.0],
        Term::Total => [1.0, 1.0, 1.0, 1.0, cfg.lambda_aug],
    }
}

/// Compares analytic gradients of `term` with numerical ones on `samples`
/// parameter entries drawn uniformly over the whole model. The numerical
/// derivative of a weighted sum is the weighted sum of the per-term
/// derivatives, each extrapolated at its own scale.
pub fn gradcheck(
    model: &CvfModel<f64>,
    input: &Tensor<f64>,
    cfg: &LossConfig,
    term: Term,
    samples: usize,
    seed: u64,
) -> GradCheck {
    let grads = analytic(model, input, cfg, term);
    let weights = term_weights(term, cfg);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let mut m = model.clone();
        let base = m.params()[t].data()[flat];
        let per_term = ridders(
            |delta| {
                m.params_mut()[t].data_mut()[flat] = base + delta;
                term_values(&m, input, cfg)
            },
            1e-3,
        );
        let numeric: f64 = per_term.iter().zip(&weights).map(|(d, w)| d * w).sum();
        let a = grads[t].data()[flat];
        let r = rel_err(a, numeric);
        if r >= out.max_rel {
            out.max_rel = r;
            out.worst = (t, flat, a, numeric);
        }
        out.checked += 1;
    }
    out
}

/// Small preset with nonzero biases, so no activation sits exactly on a
/// ReLU kink at the evaluation point.
pub fn small_model(seed: u64) -> CvfModel<f64> {
    let mut m = CvfModel::from_preset(seed, Preset::Small);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for layer in m.layers_mut() {
        layer
            .bias
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    m
}

/// Smooth clean image: a diagonal ramp in `[0.3, 0.7]` with a per-channel offset.
pub fn ramp(h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        0.3 + 0.4 * (y + x) as f64 / (h + w) as f64 + 0.02 * c as f64
    })
}
