//! Signal-dependent noise model.
//!
//! A noisy image is `clean + clean^gamma * dep + indep` where `dep` and
//! `indep` are zero-mean, spatially uncorrelated maps. The sign-scaled form
//! `clean + s2 * clean^gamma * dep + s3 * indep` produces the recombinations
//! that the cyclic losses feed back through the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{arg_err, Result};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub use crate::kernels::{pow_safe, POW_EPS};

/// Coefficient in `{-1, 0, 1}` applied to one noise component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Neg,
    Zero,
    Pos,
}

impl Sign {
    pub const ALL: [Sign; 3] = [Sign::Neg, Sign::Zero, Sign::Pos];

    pub fn value(self) -> f64 {
        match self {
            Sign::Neg => -1.0,
            Sign::Zero => 0.0,
            Sign::Pos => 1.0,
        }
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Sign::Neg),
            0 => Some(Sign::Zero),
            1 => Some(Sign::Pos),
            _ => None,
        }
    }
}

/// `clean + s2 * pow_safe(clean, gamma) * dep + s3 * indep`.
pub fn compose<T: Real>(
    clean: &Tensor<T>,
    dep: &Tensor<T>,
    indep: &Tensor<T>,
    s2: Sign,
    s3: Sign,
    gamma: f64,
) -> Result<Tensor<T>> {
    let shape = clean.shape();
    dep.expect_shape(shape, "compose: dependent map")?;
    indep.expect_shape(shape, "compose: independent map")?;
    let mut out = clean.clone();
    if s2 != Sign::Zero {
        let term = pow_safe(clean, gamma).mul(dep)?;
        out = match s2 {
            Sign::Pos => out.add(&term)?,
            _ => out.sub(&term)?,
        };
    }
    out = match s3 {
        Sign::Zero => out,
        Sign::Pos => out.add(indep)?,
        Sign::Neg => out.sub(indep)?,
    };
    Ok(out)
}

/// Recorded version of [`compose`]; `indep` may be omitted when `s3` is zero.
/// Performs the same floating-point operations in the same order.
pub fn compose_on_tape<T: Real>(
    tape: &mut Tape<T>,
    clean: Var,
    dep: Var,
    indep: Option<Var>,
    s2: Sign,
    s3: Sign,
    gamma: f64,
) -> Result<Var> {
    let mut out = clean;
    if s2 != Sign::Zero {
        let p = tape.pow_safe(clean, gamma);
        let term = tape.mul(p, dep)?;
        out = match s2 {
            Sign::Pos => tape.add(out, term)?,
            _ => tape.sub(out, term)?,
        };
    }
    if s3 != Sign::Zero {
        let Some(indep) = indep else {
            return arg_err("compose: s3 is nonzero but no independent map was given");
        };
        out = match s3 {
            Sign::Pos => tape.add(out, indep)?,
            _ => tape.sub(out, indep)?,
        };
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseDistribution {
    Gaussian,
    /// Symmetric uniform with the configured standard deviation.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModelConfig {
    pub gamma: f64,
    pub sigma_d: f64,
    pub sigma_i: f64,
    pub distribution: NoiseDistribution,
    pub seed: u64,
}

impl Default for NoiseModelConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            sigma_d: 0.08,
            sigma_i: 0.04,
            distribution: NoiseDistribution::Gaussian,
            seed: 0,
        }
    }
}

impl NoiseModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return arg_err(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.sigma_d >= 0.0) || !(self.sigma_i >= 0.0) {
            return arg_err(format!(
                "noise std must be non-negative, got sigma_d = {}, sigma_i = {}",
                self.sigma_d, self.sigma_i
            ));
        }
        Ok(())
    }
}

/// Known decomposition of a synthetic noisy image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTriple<T> {
    pub clean: Tensor<T>,
    pub dep_map: Tensor<T>,
    pub indep_map: Tensor<T>,
}

fn draw_map<T: Real>(like: &Tensor<T>, sigma: f64, dist: NoiseDistribution, rng: &mut ChaCha8Rng) -> Tensor<T> {
    if sigma == 0.0 {
        return Tensor::zeros(like.shape());
    }
    let raw: Tensor<f64> = match dist {
        NoiseDistribution::Gaussian => {
            let normal = Normal::new(0.0, sigma).expect("sigma validated");
            Tensor::from_fn(like.shape(), |_, _, _, _| normal.sample(rng))
        }
        NoiseDistribution::Uniform => {
            let half = sigma * 3f64.sqrt();
            let uniform = Uniform::new(-half, half).expect("sigma validated");
            Tensor::from_fn(like.shape(), |_, _, _, _| rng.sample(uniform))
        }
    };
    kernels::center(&raw).cast()
}

/// Corrupts each clean image with freshly drawn zero-mean noise maps.
///
/// Image `k` draws from ChaCha stream `k` of `config.seed`, so results do not
/// depend on processing order.
pub fn sample_ground_truth<T: Real>(
    clean_images: &[Tensor<T>],
    config: &NoiseModelConfig,
) -> Result<Vec<(GroundTruthTriple<T>, Tensor<T>)>> {
    config.validate()?;
    clean_images
        .iter()
        .enumerate()
        .map(|(k, clean)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(k as u64);
            let dep_map = draw_map(clean, config.sigma_d, config.distribution, &mut rng);
            let indep_map = draw_map(clean, config.sigma_i, config.distribution, &mut rng);
            let noisy = compose(clean, &dep_map, &indep_map, Sign::Pos, Sign::Pos, config.gamma)?;
            Ok((
                GroundTruthTriple {
                    clean: clean.clone(),
                    dep_map,
                    indep_map,
                },
                noisy,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
    }

    #[test]
    fn hand_evaluated_composition() {
        let s = Shape::new(1, 3, 4, 4);
        let out = compose(
            &Tensor::full(s, 0.5f64),
            &Tensor::full(s, 0.1),
            &Tensor::full(s, 0.02),
            Sign::Pos,
            Sign::Pos,
            1.0,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.57).abs() < 1e-12));
    }

    #[test]
    fn noiseless_and_zero_sign_cases_return_clean() {
        let s = Shape::new(1, 3, 5, 5);
        let clean = random(s, 1, 0.0, 1.0);
        let zero = Tensor::zeros(s);
        let dep = random(s, 2, -0.1, 0.1);
        let indep = random(s, 3, -0.1, 0.1);
        assert_eq!(compose(&clean, &zero, &zero, Sign::Pos, Sign::Pos, 1.0).unwrap(), clean);
        assert_eq!(
            compose(&clean, &dep, &indep, Sign::Zero, Sign::Zero, 1.0).unwrap(),
            clean
        );
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 5));
        assert!(matches!(
            compose(&a, &b, &a, Sign::Pos, Sign::Pos, 1.0),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn tape_compose_is_bit_identical() {
        let s = Shape::new(2, 3, 4, 4);
        let clean = random(s, 4, -0.1, 1.0).cast::<f32>();
        let dep = random(s, 5, -0.2, 0.2).cast::<f32>();
        let indep = random(s, 6, -0.2, 0.2).cast::<f32>();
        for s2 in Sign::ALL {
            for s3 in Sign::ALL {
                let direct = compose(&clean, &dep, &indep, s2, s3, 1.3).unwrap();
                let mut tape = Tape::new();
                let (c, d, i) = (
                    tape.constant(clean.clone()),
                    tape.constant(dep.clone()),
                    tape.constant(indep.clone()),
                );
                let v = compose_on_tape(&mut tape, c, d, Some(i), s2, s3, 1.3).unwrap();
                assert_eq!(tape.value(v), &direct);
            }
        }
    }

    #[test]
    fn opposite_signs_average_to_clean() {
        let s = Shape::new(1, 3, 8, 8);
        let clean = random(s, 7, 0.0, 1.0);
        let dep = random(s, 8, -0.1, 0.1);
        let indep = random(s, 9, -0.1, 0.1);
        let plus = compose(&clean, &dep, &indep, Sign::Pos, Sign::Pos, 1.0).unwrap();
        let minus = compose(&clean, &dep, &indep, Sign::Neg, Sign::Neg, 1.0).unwrap();
        let avg = plus.add(&minus).unwrap().scale(0.5);
        // equal up to one rounding of each partial sum
        assert!(avg.max_abs_diff(&clean) < 1e-15);
    }

    #[test]
    fn degenerate_config_returns_clean() {
        let clean = vec![random(Shape::new(1, 3, 16, 16), 10, 0.0, 1.0)];
        let cfg = NoiseModelConfig {
            sigma_d: 0.0,
            sigma_i: 0.0,
            ..Default::default()
        };
        let out = sample_ground_truth(&clean, &cfg).unwrap();
        assert_eq!(out[0].1, clean[0]);
    }

    #[test]
    fn sampling_is_deterministic_and_zero_mean() {
        let clean = vec![
            random(Shape::new(1, 3, 32, 32), 11, 0.0, 1.0),
            random(Shape::new(1, 3, 20, 24), 12, 0.0, 1.0),
        ];
        for distribution in [NoiseDistribution::Gaussian, NoiseDistribution::Uniform] {
            let cfg = NoiseModelConfig {
                distribution,
                seed: 99,
                ..Default::default()
            };
            let a = sample_ground_truth(&clean, &cfg).unwrap();
            let b = sample_ground_truth(&clean, &cfg).unwrap();
            assert_eq!(a, b);
            for (gt, _) in &a {
                for m in [&gt.dep_map, &gt.indep_map] {
                    let means = kernels::channel_mean(m);
                    assert!(means.data().iter().all(|v| v.abs() < 1e-6));
                }
            }
        }
    }

    #[test]
    fn per_image_streams_do_not_depend_on_list_position() {
        let a = random(Shape::new(1, 3, 8, 8), 13, 0.0, 1.0);
        let b = random(Shape::new(1, 3, 8, 8), 14, 0.0, 1.0);
        let cfg = NoiseModelConfig::default();
        let both = sample_ground_truth(&[a.clone(), b], &cfg).unwrap();
        let alone = sample_ground_truth(&[a], &cfg).unwrap();
        assert_eq!(both[0], alone[0]);
    }

    #[test]
    fn gaussian_sample_std_concentrates() {
        let clean = vec![Tensor::<f64>::full(Shape::new(1, 3, 256, 256), 0.5)];
        let cfg = NoiseModelConfig {
            sigma_i: 0.04,
            seed: 5,
            ..Default::default()
        };
        let (gt, _) = &sample_ground_truth(&clean, &cfg).unwrap()[0];
        let std = gt.indep_map.mean_square().sqrt();
        assert!((std - 0.04).abs() < 0.03 * 0.04, "std = {std}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = NoiseModelConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseModelConfig {
            sigma_d: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn compose_is_linear_in_noise_maps(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let s = Shape::new(1, 3, 4, 4);
            let clean = random(s, seed, 0.0, 1.0);
            let d1 = random(s, seed + 1, -0.1, 0.1);
            let d2 = random(s, seed + 2, -0.1, 0.1);
            let i1 = random(s, seed + 3, -0.1, 0.1);
            let i2 = random(s, seed + 4, -0.1, 0.1);
            let g = |d: &Tensor<f64>, i: &Tensor<f64>| {
                compose(&clean, d, i, Sign::Pos, Sign::Pos, 1.0).unwrap().sub(&clean).unwrap()
            };
            let mixed_d = d1.scale(a).add(&d2.scale(b)).unwrap();
            let mixed_i = i1.scale(a).add(&i2.scale(b)).unwrap();
            let lhs = g(&mixed_d, &mixed_i);
            let rhs = g(&d1, &i1).scale(a).add(&g(&d2, &i2).scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        }
    }
}
