//! Exact solver for single-cut, volume-constrained binary programs.
//!
//! With one linear objective and a cardinality constraint, the LP relaxation
//! over `{0 ≤ ρ ≤ 1, Σρ = c}` has only binary vertices, so picking the `c`
//! largest weights is optimal for both the relaxation and the binary program.

use std::cmp::Ordering;

use thiserror::Error;

use crate::cut::CutRecord;
use crate::design::DesignVector;

#[derive(Debug, Error, PartialEq)]
pub enum BinlpError {
    #[error("target count {target} exceeds the number of elements {n}")]
    TargetOutOfRange { target: usize, n: usize },
    #[error("weight at index {0} is not finite")]
    NonFiniteWeight(usize),
}

/// Solid-element count for a volume fraction, rounded to the nearest integer.
pub fn volume_count(n_elements: usize, volume: f64) -> usize {
    (n_elements as f64 * volume).round() as usize
}

/// `min W − Σ w_i ρ_i` subject to `Σ ρ_i = target`, `ρ ∈ {0,1}ⁿ`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeLP {
    weights: Vec<f64>,
    target: usize,
    constant: f64,
}

impl VolumeLP {
    pub fn new(weights: Vec<f64>, target: usize, constant: f64) -> Result<Self, BinlpError> {
        if target > weights.len() {
            return Err(BinlpError::TargetOutOfRange {
                target,
                n: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(BinlpError::NonFiniteWeight(i));
        }
        Ok(Self {
            weights,
            target,
            constant,
        })
    }

    /// The single-cut master for `cut` at the given solid count.
    pub fn from_cut(cut: &CutRecord, target: usize) -> Result<Self, BinlpError> {
        Self::new(cut.sensitivities.clone(), target, cut.constant())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// `W − Σ w_i ρ_i`.
    pub fn value(&self, rho: &DesignVector) -> f64 {
        self.constant
            - rho
                .iter()
                .zip(&self.weights)
                .filter(|(s, _)| *s)
                .map(|(_, w)| w)
                .sum::<f64>()
    }
}

/// Larger weight first, lower index on ties.
fn rank(weights: &[f64], a: usize, b: usize) -> Ordering {
    weights[b].total_cmp(&weights[a]).then(a.cmp(&b))
}

/// Places the `target` solid elements at the largest weights, ties broken
/// toward the lowest index. Linear time on average.
pub fn solve_greedy(prob: &VolumeLP) -> DesignVector {
    let n = prob.weights.len();
    let c = prob.target;
    if c == 0 {
        return DesignVector::void(n);
    }
    if c == n {
        return DesignVector::solid(n);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(c - 1, |&a, &b| rank(&prob.weights, a, b));
    let mut rho = DesignVector::void(n);
    for &i in &idx[..c] {
        rho.set(i, true);
    }
    rho
}

/// Value of the single-cut objective `fᵀu^j − Σ w̃_i^j (ρ_i − ρ_i^j)`.
pub fn objective_value(cut: &CutRecord, rho: &DesignVector) -> f64 {
    cut.evaluate(rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_largest() {
        let p = VolumeLP::new(vec![3.0, 1.0, 2.0], 2, 0.0).unwrap();
        assert_eq!(solve_greedy(&p), DesignVector::from_bits(&[1, 0, 1]));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = VolumeLP::new(vec![1.0; 4], 2, 0.0).unwrap();
        assert_eq!(solve_greedy(&p), DesignVector::from_bits(&[1, 1, 0, 0]));
        let p = VolumeLP::new(vec![0.5, 2.0, 0.5, 0.5, 2.0], 3, 0.0).unwrap();
        assert_eq!(solve_greedy(&p), DesignVector::from_bits(&[1, 1, 0, 0, 1]));
    }

    #[test]
    fn edge_targets() {
        let p = VolumeLP::new(vec![1.0, 2.0], 0, 0.0).unwrap();
        assert_eq!(solve_greedy(&p).count_solid(), 0);
        let p = VolumeLP::new(vec![1.0, 2.0], 2, 0.0).unwrap();
        assert_eq!(solve_greedy(&p).count_solid(), 2);
        assert_eq!(
            VolumeLP::new(vec![1.0], 2, 0.0).unwrap_err(),
            BinlpError::TargetOutOfRange { target: 2, n: 1 }
        );
        assert_eq!(VolumeLP::new(vec![f64::NAN], 0, 0.0).unwrap_err(), BinlpError::NonFiniteWeight(0));
    }

    #[test]
    fn volume_count_rounds() {
        assert_eq!(volume_count(1200, 0.5), 600);
        assert_eq!(volume_count(1200, 1.0 - 1.0 / 24.0), 1150);
        assert_eq!(volume_count(7, 0.5), 4);
    }

    #[test]
    fn objective_at_own_layout_and_single_flip() {
        let cut = CutRecord {
            iteration: 1,
            compliance: 10.0,
            layout: DesignVector::from_bits(&[1, 0, 1, 0]),
            sensitivities: vec![0.5, 0.25, 2.0, 1.5],
        };
        assert_eq!(objective_value(&cut, &cut.layout), 10.0);
        let flipped = DesignVector::from_bits(&[1, 1, 1, 0]);
        assert_eq!(objective_value(&cut, &flipped), 10.0 - 0.25);
        let lp = VolumeLP::from_cut(&cut, 2).unwrap();
        let rho = DesignVector::from_bits(&[0, 1, 0, 1]);
        assert!((lp.value(&rho) - objective_value(&cut, &rho)).abs() < 1e-12);
    }
}
