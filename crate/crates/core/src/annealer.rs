//! QUBO minimization backends: exhaustive enumeration and simulated annealing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::qubo::{QuboError, QuboModel};

/// Largest model `solve_exhaustive` accepts.
pub const EXHAUSTIVE_MAX_VARS: usize = 24;

#[derive(Debug, Error)]
pub enum AnnealError {
    #[error("exhaustive search is capped at {cap} variables (model has {n}); use the annealing backend (sa)")]
    TooManyVariables { n: usize, cap: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Qubo(#[from] QuboError),
}

/// Metropolis annealing settings. `beta_start`/`beta_end` default to values
/// derived from the model's coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub reads: usize,
    pub sweeps: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub seed: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            reads: 1000,
            sweeps: 1000,
            beta_start: None,
            beta_end: None,
            seed: 0,
        }
    }
}

impl AnnealSchedule {
    fn validate(&self) -> Result<(), AnnealError> {
        if self.reads == 0 {
            return Err(AnnealError::InvalidSchedule("reads must be at least 1".into()));
        }
        if self.sweeps == 0 {
            return Err(AnnealError::InvalidSchedule("sweeps must be at least 1".into()));
        }
        for b in [self.beta_start, self.beta_end].into_iter().flatten() {
            if !(b > 0.0 && b.is_finite()) {
                return Err(AnnealError::InvalidSchedule(format!("inverse temperature {b} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub assignment: Vec<u8>,
    pub energy: f64,
    pub occurrences: usize,
}

/// Distinct samples sorted by energy, then assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<Sample>,
}

impl SampleSet {
    fn from_raw(mut raw: Vec<(Vec<u8>, f64)>) -> Self {
        raw.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let mut samples: Vec<Sample> = Vec::new();
        for (assignment, energy) in raw {
            match samples.last_mut() {
                Some(last) if last.assignment == assignment => last.occurrences += 1,
                _ => samples.push(Sample {
                    assignment,
                    energy,
                    occurrences: 1,
                }),
            }
        }
        Self { samples }
    }

    pub fn best(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn total_reads(&self) -> usize {
        self.samples.iter().map(|s| s.occurrences).sum()
    }
}

/// `constant + Σ linear + Σ pairwise` over the set bits.
pub fn energy(model: &QuboModel, assignment: &[u8]) -> Result<f64, QuboError> {
    model.energy(assignment)
}

/// Adjacency form used by the single-flip samplers.
struct Couplings {
    linear: Vec<f64>,
    ptr: Vec<usize>,
    nbr: Vec<usize>,
    val: Vec<f64>,
}

impl Couplings {
    fn new(model: &QuboModel) -> Self {
        let n = model.n_vars();
        let mut lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in model.quadratic() {
            if v != 0.0 {
                lists[i].push((j, v));
                lists[j].push((i, v));
            }
        }
        let mut ptr = vec![0];
        let mut nbr = Vec::new();
        let mut val = Vec::new();
        for l in lists {
            for (j, v) in l {
                nbr.push(j);
                val.push(v);
            }
            ptr.push(nbr.len());
        }
        Self {
            linear: model.linear().to_vec(),
            ptr,
            nbr,
            val,
        }
    }

    fn n(&self) -> usize {
        self.linear.len()
    }

    /// Local fields `h_i = linear_i + Σ_j J_ij x_j`.
    fn fields(&self, x: &[u8]) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                self.linear[i]
                    + (self.ptr[i]..self.ptr[i + 1])
                        .filter(|&k| x[self.nbr[k]] != 0)
                        .map(|k| self.val[k])
                        .sum::<f64>()
            })
            .collect()
    }

    fn flip(&self, i: usize, x: &mut [u8], h: &mut [f64]) {
        let s = if x[i] == 0 { 1.0 } else { -1.0 };
        x[i] ^= 1;
        for k in self.ptr[i]..self.ptr[i + 1] {
            h[self.nbr[k]] += s * self.val[k];
        }
    }

    /// Default inverse temperatures: hot enough that a typical coefficient is
    /// accepted with high probability, cold enough that the smallest
    /// meaningful energy step is frozen out.
    fn default_betas(&self) -> (f64, f64) {
        let mags: Vec<f64> = self
            .linear
            .iter()
            .chain(self.val.iter())
            .map(|v| v.abs())
            .filter(|&v| v > 0.0)
            .collect();
        if mags.is_empty() {
            return (0.1, 1.0);
        }
        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
        // smallest nonzero coefficient per variable, median over variables
        let mut per_var: Vec<f64> = (0..self.n())
            .filter_map(|i| {
                std::iter::once(self.linear[i].abs())
                    .chain((self.ptr[i]..self.ptr[i + 1]).map(|k| self.val[k].abs()))
                    .filter(|&v| v > 0.0)
                    .min_by(f64::total_cmp)
            })
            .collect();
        per_var.sort_by(f64::total_cmp);
        let gap = per_var[per_var.len() / 2];
        let b0 = 0.1 / mean;
        let b1 = (50.0 / gap).max(b0 * 10.0);
        (b0, b1)
    }
}

/// Exact minimum by Gray-code enumeration of all `2ⁿ` assignments. Ties go to
/// the lexicographically smallest assignment.
pub fn solve_exhaustive(model: &QuboModel) -> Result<SampleSet, AnnealError> {
    let n = model.n_vars();
    if n > EXHAUSTIVE_MAX_VARS {
        return Err(AnnealError::TooManyVariables {
            n,
            cap: EXHAUSTIVE_MAX_VARS,
        });
    }
    let c = Couplings::new(model);
    let mut x = vec![0u8; n];
    let mut h = c.fields(&x);
    let mut e = model.constant();
    let scale = 1e-9 * (1.0 + model.linear().iter().map(|v| v.abs()).sum::<f64>());
    let mut best_x = x.clone();
    let mut best_exact = e;
    let mut best_running = e;
    for g in 1u64..(1u64 << n) {
        let i = g.trailing_zeros() as usize;
        e += if x[i] == 0 { h[i] } else { -h[i] };
        c.flip(i, &mut x, &mut h);
        if e <= best_running + scale {
            // the running sum drifts; confirm candidates with an exact evaluation
            let exact = model.energy(&x)?;
            if exact < best_exact || (exact == best_exact && x < best_x) {
                best_exact = exact;
                best_x.copy_from_slice(&x);
            }
            best_running = best_running.min(e);
        }
    }
    Ok(SampleSet::from_raw(vec![(best_x, best_exact)]))
}

fn beta_schedule(b0: f64, b1: f64, sweeps: usize) -> Vec<f64> {
    if sweeps == 1 {
        return vec![b1];
    }
    let (l0, l1) = (b0.ln(), b1.ln());
    (0..sweeps)
        .map(|s| (l0 + (l1 - l0) * s as f64 / (sweeps - 1) as f64).exp())
        .collect()
}

/// Single-flip Metropolis annealing with `reads` independent restarts. Read
/// `r` draws from ChaCha stream `r` of `seed`, so the result does not depend
/// on how reads are scheduled across threads. Each read reports the lowest
/// state it visited.
pub fn solve_sa(model: &QuboModel, schedule: &AnnealSchedule) -> Result<SampleSet, AnnealError> {
    schedule.validate()?;
    let c = Couplings::new(model);
    let n = c.n();
    if n == 0 {
        return Ok(SampleSet::from_raw(vec![(Vec::new(), model.constant()); schedule.reads]));
    }
    let (d0, d1) = c.default_betas();
    let b0 = schedule.beta_start.unwrap_or(d0);
    let b1 = schedule.beta_end.unwrap_or(d1).max(b0);
    let betas = beta_schedule(b0, b1, schedule.sweeps);

    let raw: Vec<(Vec<u8>, f64)> = (0..schedule.reads)
        .into_par_iter()
        .map(|read| {
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
            rng.set_stream(read as u64);
            let mut x: Vec<u8> = (0..n).map(|_| rng.gen::<bool>() as u8).collect();
            let mut h = c.fields(&x);
            let mut e = 0.0;
            let mut best_e = 0.0;
            let mut best_x = x.clone();
            for &beta in &betas {
                for i in 0..n {
                    let delta = if x[i] == 0 { h[i] } else { -h[i] };
                    if delta <= 0.0 || rng.gen::<f64>() < (-beta * delta).exp() {
                        c.flip(i, &mut x, &mut h);
                        e += delta;
                        if e < best_e {
                            best_e = e;
                            best_x.copy_from_slice(&x);
                        }
                    }
                }
            }
            // greedy descent from the best visited state
            let mut h = c.fields(&best_x);
            loop {
                let mut improved = false;
                for i in 0..n {
                    let delta = if best_x[i] == 0 { h[i] } else { -h[i] };
                    if delta < 0.0 {
                        c.flip(i, &mut best_x, &mut h);
                        improved = true;
                    }
                }
                if !improved {
                    break;
                }
            }
            let exact = model.energy(&best_x).expect("assignment length matches model");
            (best_x, exact)
        })
        .collect();
    Ok(SampleSet::from_raw(raw))
}

/// Which QUBO backend to use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backend {
    Exhaustive,
    Annealing(AnnealSchedule),
}

impl Backend {
    pub fn solve(&self, model: &QuboModel) -> Result<SampleSet, AnnealError> {
        match self {
            Backend::Exhaustive => solve_exhaustive(model),
            Backend::Annealing(s) => solve_sa(model, s),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Exhaustive => "exhaustive",
            Backend::Annealing(_) => "sa",
        }
    }
}
