//! Reference decomposers for verifying the losses on synthetic data.
//!
//! None of these are used in training.

use crate::augmentation::enumerate_combos;
use crate::error::{arg_err, Result};
use crate::network::{Decomposer, DecompositionVars};
use crate::noise::{compose, GroundTruthTriple, Sign};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Knows the true components of one synthetic image and answers every
/// recombination the losses can feed it with the matching components.
pub struct OracleDecomposer<T> {
    cases: Vec<(Tensor<T>, [Tensor<T>; 3])>,
}

impl<T: Real> OracleDecomposer<T> {
    pub fn new(gt: &GroundTruthTriple<T>, gamma: f64) -> Result<Self> {
        let GroundTruthTriple {
            clean,
            dep_map,
            indep_map,
        } = gt;
        let zero = Tensor::zeros(clean.shape());
        let scaled = |t: &Tensor<T>, s: Sign| match s {
            Sign::Pos => t.clone(),
            Sign::Neg => t.scale(-T::one()),
            Sign::Zero => zero.clone(),
        };
        let mut cases = vec![
            (
                compose(clean, dep_map, indep_map, Sign::Pos, Sign::Pos, gamma)?,
                [clean.clone(), dep_map.clone(), indep_map.clone()],
            ),
            (clean.clone(), [clean.clone(), zero.clone(), zero.clone()]),
            (
                compose(clean, dep_map, &zero, Sign::Pos, Sign::Zero, gamma)?,
                [clean.clone(), dep_map.clone(), zero.clone()],
            ),
            (indep_map.clone(), [zero.clone(), zero.clone(), indep_map.clone()]),
        ];
        for c in enumerate_combos(true, true) {
            cases.push((
                compose(clean, dep_map, indep_map, c.s2, c.s3, gamma)?,
                [clean.clone(), scaled(dep_map, c.s2), scaled(indep_map, c.s3)],
            ));
        }
        Ok(Self { cases })
    }
}

impl<T: Real> Decomposer<T> for OracleDecomposer<T> {
    fn decompose(&self, tape: &mut Tape<T>, input: Var) -> Result<DecompositionVars> {
        let x = tape.value(input);
        let Some((_, out)) = self
            .cases
            .iter()
            .find(|(key, _)| key.shape() == x.shape() && key.max_abs_diff(x) == 0.0)
        else {
            return arg_err("oracle: input is not a known recombination of the ground truth");
        };
        let [c, d, i] = out.clone();
        Ok(DecompositionVars {
            clean: tape.constant(c),
            dep: tape.constant(d),
            indep: tape.constant(i),
        })
    }
}

/// Returns the input as the clean image with zero noise maps.
pub struct IdentityDecomposer;

impl<T: Real> Decomposer<T> for IdentityDecomposer {
    fn decompose(&self, tape: &mut Tape<T>, input: Var) -> Result<DecompositionVars> {
        let zeros = Tensor::zeros(tape.shape(input));
        Ok(DecompositionVars {
            clean: input,
            dep: tape.constant(zeros.clone()),
            indep: tape.constant(zeros),
        })
    }
}
