//! Objective terms against decomposers whose outputs are known exactly.

mod common;

use common::{analytic, ramp, small_model, uniform, Term};
use cvf_sid::losses::{local_variance, total_loss, variance_estimate, variance_residual, LossConfig};
use cvf_sid::noise::{sample_ground_truth, NoiseModelConfig};
use cvf_sid::oracle::{IdentityDecomposer, OracleDecomposer};
use cvf_sid::tape::Tape;
use cvf_sid::{CvfModel, Preset, Shape};
use proptest::prelude::*;

fn noise(gamma: f64, seed: u64) -> NoiseModelConfig {
    NoiseModelConfig {
        gamma,
        seed,
        ..NoiseModelConfig::default()
    }
}

#[test]
fn oracle_drives_cyclic_terms_to_zero() {
    for (gamma, seed) in [(1.0, 0), (0.5, 1), (1.3, 2)] {
        let clean = ramp(48, 40);
        let (gt, noisy) = sample_ground_truth(&[clean], &noise(gamma, seed)).unwrap().remove(0);
        let oracle = OracleDecomposer::new(&gt, gamma).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(noisy.clone());
        let cfg = LossConfig {
            gamma,
            ..LossConfig::default()
        };
        let (vars, dec) = total_loss(&mut tape, &oracle, x, &cfg).unwrap();
        let b = vars.breakdown(&tape);
        for (name, v) in [("con", b.con), ("id", b.id), ("zero", b.zero), ("aug", b.aug)] {
            assert!(v < 1e-10, "gamma {gamma}: {name} = {v:e}");
        }

        let est = variance_estimate(&mut tape, &noisy, &dec, gamma, cfg.patch).unwrap();
        let residual = variance_residual(&mut tape, &est).unwrap();
        for c in 0..3 {
            let s = tape.value(residual).at(0, c, 0, 0);
            let scale = tape.value(est.sigma_d_sq).at(0, c, 0, 0) * tape.value(est.clean_power_sum).at(0, c, 0, 0)
                + est.windows as f64 * tape.value(est.sigma_i_sq).at(0, c, 0, 0);
            assert!(s.abs() / scale < 0.15, "gamma {gamma} channel {c}: {}", s / scale);
        }
    }
}

#[test]
fn identity_decomposer_leaves_only_the_variance_term() {
    let input = uniform(Shape::new(2, 3, 10, 9), 3, 0.1, 0.9);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let (vars, _) = total_loss(&mut tape, &IdentityDecomposer, x, &LossConfig::default()).unwrap();
    let b = vars.breakdown(&tape);
    assert_eq!((b.con, b.id, b.zero, b.aug), (0.0, 0.0, 0.0, 0.0));

    // With both noise maps zero the residual is just the summed local variance.
    let lv = local_variance(&input, 6).unwrap();
    let m = lv.shape().plane() as f64;
    let mut acc = 0.0;
    for n in 0..2 {
        for c in 0..3 {
            let s: f64 = lv.plane(n, c).iter().sum();
            acc += s * s;
        }
    }
    let expected = acc / 6.0 / m;
    assert!((b.reg - expected).abs() <= 1e-12 * expected, "{} vs {expected}", b.reg);
    assert!((b.total - b.reg).abs() <= 1e-15 * b.reg);
}

#[test]
fn detaching_changes_gradients_but_not_values() {
    let model = small_model(11);
    let input = uniform(Shape::new(1, 3, 12, 12), 12, 0.2, 0.8);
    let attached = LossConfig::default();
    let detached = LossConfig {
        detach_second_pass: true,
        ..LossConfig::default()
    };
    assert_eq!(
        common::loss_value(&model, &input, &attached, Term::Total),
        common::loss_value(&model, &input, &detached, Term::Total)
    );
    let ga = analytic(&model, &input, &attached, Term::Total);
    let gd = analytic(&model, &input, &detached, Term::Total);
    let diff: f64 = ga.iter().zip(&gd).map(|(a, d)| a.max_abs_diff(d)).fold(0.0, f64::max);
    assert!(diff > 1e-9, "detaching had no effect on gradients");
}

#[test]
fn lambda_zero_skips_augmentation() {
    let model = small_model(13);
    let input = uniform(Shape::new(1, 3, 10, 10), 14, 0.2, 0.8);
    let cfg = LossConfig {
        lambda_aug: 0.0,
        ..LossConfig::default()
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(input);
    let (vars, _) = total_loss(&mut tape, &bound, x, &cfg).unwrap();
    assert!(vars.aug.is_none());
    let b = vars.breakdown(&tape);
    assert_eq!(b.aug, 0.0);
    assert_eq!(b.total, b.con + b.id + b.zero + b.reg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn breakdown_total_is_the_weighted_sum(seed in 0u64..1000, lambda in 0.01f64..2.0, gamma in 0.3f64..1.5) {
        let model: CvfModel<f32> = CvfModel::from_preset(seed, Preset::Small);
        let input = uniform(Shape::new(2, 3, 9, 11), seed + 1, 0.0, 1.0).cast::<f32>();
        let cfg = LossConfig { lambda_aug: lambda, gamma, ..LossConfig::default() };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(input);
        let (vars, _) = total_loss(&mut tape, &bound, x, &cfg).unwrap();
        let b = vars.breakdown(&tape);
        let sum = b.con + b.id + b.zero + b.reg + lambda * b.aug;
        prop_assert!((b.total - sum).abs() <= 1e-6 * sum.abs(), "{} vs {}", b.total, sum);
        prop_assert!(b.terms().iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
    }
}
