//! Radius-based sensitivity filter.
//!
//! Element energies are averaged over a cone of radius `r` around each
//! element centroid, which suppresses checkerboard layouts. Void elements get
//! their averaged value scaled by the void factor.

use thiserror::Error;

use crate::design::DesignVector;
use crate::fem::MeshSpec;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("filter radius must be positive and finite (got {0})")]
    InvalidRadius(f64),
}

#[derive(Debug, Clone)]
pub struct FilterKernel {
    radius: f64,
    /// `(neighbor, weight)` with weight `r - distance > 0`; self first
    neighbors: Vec<Vec<(usize, f64)>>,
    weight_sums: Vec<f64>,
}

impl FilterKernel {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn n_elements(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn weight_sum(&self, i: usize) -> f64 {
        self.weight_sums[i]
    }
}

/// Precomputes neighbor lists with weights `h = max(0, r − ‖x_i − x_l‖)`.
/// Only strictly positive weights are kept.
pub fn build_kernel(mesh: &MeshSpec, r: f64) -> Result<FilterKernel, FilterError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(FilterError::InvalidRadius(r));
    }
    let reach = r.ceil() as isize;
    let (nelx, nely) = (mesh.nelx() as isize, mesh.nely() as isize);
    let mut neighbors = Vec::with_capacity(mesh.n_elements());
    let mut weight_sums = Vec::with_capacity(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let (ex, ey) = mesh.element_position(e);
        let mut list = vec![(e, r)];
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (x, y) = (ex as isize + dx, ey as isize + dy);
                if x < 0 || y < 0 || x >= nelx || y >= nely {
                    continue;
                }
                let h = r - ((dx * dx + dy * dy) as f64).sqrt();
                if h > 0.0 {
                    list.push((mesh.element(x as usize, y as usize), h));
                }
            }
        }
        weight_sums.push(list.iter().map(|&(_, h)| h).sum());
        neighbors.push(list);
    }
    Ok(FilterKernel {
        radius: r,
        neighbors,
        weight_sums,
    })
}

/// Filtered sensitivities `w̃_i`: the kernel-weighted mean of the energies,
/// multiplied by `void_scale` where `rho_i` is void.
pub fn filter_sensitivities(
    kernel: &FilterKernel,
    energies: &[f64],
    rho: &DesignVector,
    void_scale: f64,
) -> Vec<f64> {
    assert_eq!(energies.len(), kernel.n_elements(), "energy array size");
    assert_eq!(rho.len(), kernel.n_elements(), "layout size");
    (0..kernel.n_elements())
        .map(|i| {
            let num: f64 = kernel.neighbors[i].iter().map(|&(l, h)| h * energies[l]).sum();
            let avg = num / kernel.weight_sums[i];
            if rho.get(i) {
                avg
            } else {
                void_scale * avg
            }
        })
        .collect()
}

/// Where the void factor enters the filter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum VoidScaling {
    /// Scale the averaged value of void elements ([`filter_sensitivities`]).
    Outer,
    /// Scale each void element's energy before averaging, so voids next to
    /// loaded material inherit part of its sensitivity.
    #[default]
    Inner,
}

impl std::str::FromStr for VoidScaling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "outer" => Ok(Self::Outer),
            "inner" => Ok(Self::Inner),
            other => Err(format!("unknown void scaling `{other}` (expected outer or inner)")),
        }
    }
}

impl std::fmt::Display for VoidScaling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Outer => "outer",
            Self::Inner => "inner",
        })
    }
}

/// Kernel-weighted mean of `ρ`-scaled energies: void entries contribute
/// `void_scale · e_l` to every average they fall into.
pub fn filter_scaled_energies(
    kernel: &FilterKernel,
    energies: &[f64],
    rho: &DesignVector,
    void_scale: f64,
) -> Vec<f64> {
    assert_eq!(energies.len(), kernel.n_elements(), "energy array size");
    assert_eq!(rho.len(), kernel.n_elements(), "layout size");
    (0..kernel.n_elements())
        .map(|i| {
            let num: f64 = kernel.neighbors[i]
                .iter()
                .map(|&(l, h)| h * energies[l] * if rho.get(l) { 1.0 } else { void_scale })
                .sum();
            num / kernel.weight_sums[i]
        })
        .collect()
}

/// Dispatches on the void-scaling placement.
pub fn filter(kernel: &FilterKernel, energies: &[f64], rho: &DesignVector, void_scale: f64, mode: VoidScaling) -> Vec<f64> {
    match mode {
        VoidScaling::Outer => filter_sensitivities(kernel, energies, rho, void_scale),
        VoidScaling::Inner => filter_scaled_energies(kernel, energies, rho, void_scale),
    }
}
