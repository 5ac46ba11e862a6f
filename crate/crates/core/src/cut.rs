use crate::design::DesignVector;

/// One Benders cut: the linearization of the compliance around a solved
/// layout, built from its filtered sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct CutRecord {
    /// Position of the cut in its pool (1-based, in generation order).
    pub iteration: usize,
    /// `fᵀu` at `layout`.
    pub compliance: f64,
    pub layout: DesignVector,
    /// Filtered sensitivities, all nonnegative.
    pub sensitivities: Vec<f64>,
}

impl CutRecord {
    /// Linear under-estimate `fᵀu − Σ w̃_i (ρ_i − ρ_i^j)`.
    ///
    /// Only the differing positions contribute, so evaluating at the cut's
    /// own layout returns `compliance` exactly.
    pub fn evaluate(&self, rho: &DesignVector) -> f64 {
        assert_eq!(rho.len(), self.layout.len(), "layout size");
        let mut delta = 0.0;
        for (i, (a, b)) in rho.iter().zip(self.layout.iter()).enumerate() {
            match (a, b) {
                (true, false) => delta += self.sensitivities[i],
                (false, true) => delta -= self.sensitivities[i],
                _ => {}
            }
        }
        self.compliance - delta
    }

    /// Constant part `W = fᵀu + Σ w̃_i ρ_i^j` of the cut written as
    /// `W − Σ w̃_i ρ_i`.
    pub fn constant(&self) -> f64 {
        self.compliance
            + self
                .layout
                .iter()
                .zip(&self.sensitivities)
                .filter(|(s, _)| *s)
                .map(|(_, w)| w)
                .sum::<f64>()
    }
}
