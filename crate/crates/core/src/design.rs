//! Binary material layouts.

use std::fmt;

/// Per-element material indicator: `true` is solid, `false` is void.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DesignVector(Vec<bool>);

impl DesignVector {
    pub fn solid(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn void(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, solid: bool) {
        self.0[i] = solid;
    }

    /// 1.0 for solid, 0.0 for void.
    pub fn value(&self, i: usize) -> f64 {
        if self.0[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count_solid(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// Number of positions where the two layouts differ.
    pub fn hamming(&self, other: &DesignVector) -> usize {
        self.0
            .iter()
            .zip(other.0.iter())
            .filter(|(a, b)| a != b)
            .count()
    }
}

impl From<Vec<bool>> for DesignVector {
    fn from(v: Vec<bool>) -> Self {
        Self(v)
    }
}

impl fmt::Debug for DesignVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.0.iter().map(|&b| if b { '1' } else { '0' }).collect();
        write!(f, "DesignVector({s})")
    }
}
