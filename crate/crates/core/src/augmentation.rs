//! Sign recombinations of a decomposition used as self-supervised
//! augmentations.
//!
//! The clean coefficient is always 1. The pairs `(0, 0)` and `(1, 0)` are
//! never produced: they repeat inputs that the identity and zero losses
//! already cover.

use crate::noise::Sign;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugSet {
    /// One noise component removed or flipped alone.
    A,
    /// Both components present with independent signs.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AugCombo {
    pub s2: Sign,
    pub s3: Sign,
    pub set: AugSet,
}

const fn combo(s2: Sign, s3: Sign, set: AugSet) -> AugCombo {
    AugCombo { s2, s3, set }
}

pub const SET_A: [AugCombo; 3] = [
    combo(Sign::Zero, Sign::Pos, AugSet::A),
    combo(Sign::Zero, Sign::Neg, AugSet::A),
    combo(Sign::Neg, Sign::Zero, AugSet::A),
];

pub const SET_B: [AugCombo; 4] = [
    combo(Sign::Pos, Sign::Pos, AugSet::B),
    combo(Sign::Pos, Sign::Neg, AugSet::B),
    combo(Sign::Neg, Sign::Pos, AugSet::B),
    combo(Sign::Neg, Sign::Neg, AugSet::B),
];

/// The enabled combos, set A first, in a fixed order.
pub fn enumerate_combos(enable_a: bool, enable_b: bool) -> Vec<AugCombo> {
    let mut out = Vec::with_capacity(7);
    if enable_a {
        out.extend_from_slice(&SET_A);
    }
    if enable_b {
        out.extend_from_slice(&SET_B);
    }
    out
}
