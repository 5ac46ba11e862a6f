//! QUBO models for the Benders master problem.
//!
//! The multi-cut master `min η s.t. η ≥ cut_j(ρ), Σρ = c` is turned into an
//! unconstrained binary problem by adding a nonnegative slack to each cut,
//! expanding `η` and every slack in bits, and moving the equalities into
//! squared penalties. The split variant first fixes the elements on which
//! every single-cut subproblem agrees and only keeps the rest as variables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

use crate::binlp::{solve_greedy, VolumeLP};
use crate::cut::CutRecord;
use crate::design::DesignVector;

#[derive(Debug, Error)]
pub enum QuboError {
    #[error("encoding bound must be positive and finite (got {0})")]
    InvalidBound(f64),
    #[error("encoding needs at least one bit")]
    NoBits,
    #[error("all cuts agree on every element; nothing left for the reduced problem")]
    EmptyFreeSet,
    #[error("at least one cut is required")]
    NoCuts,
    #[error("assignment has {got} entries but the model has {expected} variables")]
    LengthMismatch { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `constant + Σ linear_i x_i + Σ_{i<j} quadratic_ij x_i x_j` over `x ∈ {0,1}ⁿ`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuboModel {
    constant: f64,
    linear: Vec<f64>,
    quadratic: BTreeMap<(usize, usize), f64>,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl QuboModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a named variable and returns its index.
    pub fn add_variable(&mut self, name: impl Into<String>) -> usize {
        let name = name.into();
        let i = self.linear.len();
        self.linear.push(0.0);
        self.index.insert(name.clone(), i);
        self.names.push(name);
        i
    }

    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn quadratic(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.quadratic.iter().map(|(&(i, j), &v)| (i, j, v))
    }

    pub fn n_quadratic(&self) -> usize {
        self.quadratic.len()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn add_constant(&mut self, v: f64) {
        self.constant += v;
    }

    pub fn add_linear(&mut self, i: usize, v: f64) {
        self.linear[i] += v;
    }

    /// Adds `v x_i x_j`; a diagonal term folds into the linear part.
    pub fn add_quadratic(&mut self, i: usize, j: usize, v: f64) {
        if i == j {
            self.linear[i] += v;
            return;
        }
        let key = if i < j { (i, j) } else { (j, i) };
        *self.quadratic.entry(key).or_insert(0.0) += v;
    }

    /// Adds `weight · (offset + Σ a_k x_k)²`. Repeated variables in `terms`
    /// are merged first.
    pub fn add_squared_penalty(&mut self, weight: f64, offset: f64, terms: &[(usize, f64)]) {
        let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
        for &(i, a) in terms {
            *merged.entry(i).or_insert(0.0) += a;
        }
        let merged: Vec<(usize, f64)> = merged.into_iter().filter(|&(_, a)| a != 0.0).collect();
        self.constant += weight * offset * offset;
        for (k, &(i, a)) in merged.iter().enumerate() {
            // x² = x
            self.linear[i] += weight * (2.0 * offset * a + a * a);
            for &(j, b) in &merged[k + 1..] {
                self.add_quadratic(i, j, 2.0 * weight * a * b);
            }
        }
    }

    /// Objective value at a 0/1 assignment.
    pub fn energy(&self, x: &[u8]) -> Result<f64, QuboError> {
        if x.len() != self.n_vars() {
            return Err(QuboError::LengthMismatch {
                expected: self.n_vars(),
                got: x.len(),
            });
        }
        let mut e = self.constant;
        for (i, &c) in self.linear.iter().enumerate() {
            if x[i] != 0 {
                e += c;
            }
        }
        for (&(i, j), &v) in &self.quadratic {
            if x[i] != 0 && x[j] != 0 {
                e += v;
            }
        }
        Ok(e)
    }

    /// Plain-text coefficient listing: `# constant` header, `# var` name
    /// comments, then `i i value` for linear and `i j value` (i < j) for
    /// pairwise terms.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# qubo {} variables", self.n_vars());
        let _ = writeln!(s, "# constant {:?}", self.constant);
        for (i, name) in self.names.iter().enumerate() {
            let _ = writeln!(s, "# var {i} {name}");
        }
        for (i, &c) in self.linear.iter().enumerate() {
            if c != 0.0 {
                let _ = writeln!(s, "{i} {i} {c:?}");
            }
        }
        for (&(i, j), &v) in &self.quadratic {
            if v != 0.0 {
                let _ = writeln!(s, "{i} {j} {v:?}");
            }
        }
        s
    }

    /// Parses the format written by [`QuboModel::to_text`]. The variable count
    /// is the larger of the `# qubo` header, the `# var` entries and the
    /// highest index used; unnamed variables are called `x<i>`.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, QuboError> {
        let mut constant = 0.0;
        let mut declared = 0usize;
        let mut names: BTreeMap<usize, String> = BTreeMap::new();
        let mut terms: Vec<(usize, usize, f64)> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            let parse_err = |message: String| QuboError::Parse { line: lineno, message };
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                let mut f = rest.split_whitespace();
                match f.next() {
                    Some("constant") => {
                        let v = f.next().ok_or_else(|| parse_err("missing constant value".into()))?;
                        constant = v.parse().map_err(|_| parse_err(format!("bad constant `{v}`")))?;
                    }
                    Some("qubo") => {
                        if let Some(n) = f.next().and_then(|v| v.parse().ok()) {
                            declared = n;
                        }
                    }
                    Some("var") => {
                        let i: usize = f
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| parse_err("bad variable index".into()))?;
                        let name = f.next().ok_or_else(|| parse_err("missing variable name".into()))?;
                        names.insert(i, name.to_string());
                    }
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = t.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected `i j value`, found {} fields", fields.len())));
            }
            let i: usize = fields[0].parse().map_err(|_| parse_err(format!("bad index `{}`", fields[0])))?;
            let j: usize = fields[1].parse().map_err(|_| parse_err(format!("bad index `{}`", fields[1])))?;
            let v: f64 = fields[2].parse().map_err(|_| parse_err(format!("bad value `{}`", fields[2])))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value `{}`", fields[2])));
            }
            terms.push((i, j, v));
        }
        let n = terms
            .iter()
            .map(|&(i, j, _)| i.max(j) + 1)
            .chain(names.keys().map(|&i| i + 1))
            .chain(std::iter::once(declared))
            .max()
            .unwrap_or(0);
        let mut model = QuboModel::new();
        for i in 0..n {
            let name = names.get(&i).cloned().unwrap_or_else(|| format!("x{i}"));
            model.add_variable(name);
        }
        model.constant = constant;
        for (i, j, v) in terms {
            model.add_quadratic(i, j, v);
        }
        Ok(model)
    }
}

/// Bit expansion of a continuous variable on `[0, 2U(1 − 2⁻ⁿ)]`:
/// `x̃ = U(1 − 2⁻ⁿ) b₀ + Σ_{i=1..n} U/2ⁱ bᵢ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryEncoding {
    bound: f64,
    bits: usize,
}

pub fn encode_continuous(bound: f64, bits: usize) -> Result<BinaryEncoding, QuboError> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(QuboError::InvalidBound(bound));
    }
    if bits == 0 {
        return Err(QuboError::NoBits);
    }
    Ok(BinaryEncoding { bound, bits })
}

impl BinaryEncoding {
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `n`; the encoding uses `n + 1` binary variables.
    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn n_vars(&self) -> usize {
        self.bits + 1
    }

    pub fn weights(&self) -> Vec<f64> {
        let n = self.bits as i32;
        std::iter::once(self.bound * (1.0 - 2f64.powi(-n)))
            .chain((1..=n).map(|i| self.bound / 2f64.powi(i)))
            .collect()
    }

    /// Lattice spacing `U / 2ⁿ`.
    pub fn step(&self) -> f64 {
        self.bound / 2f64.powi(self.bits as i32)
    }

    pub fn max_value(&self) -> f64 {
        2.0 * self.bound * (1.0 - 2f64.powi(-(self.bits as i32)))
    }

    pub fn decode(&self, bits: &[u8]) -> f64 {
        assert_eq!(bits.len(), self.n_vars(), "encoding bit count");
        self.weights()
            .iter()
            .zip(bits)
            .filter(|(_, &b)| b != 0)
            .fold(0.0, |acc, (w, _)| acc + w)
    }

    /// Bits for the lattice point `m · U/2ⁿ`, `0 ≤ m ≤ 2(2ⁿ − 1)`.
    pub fn lattice_bits(&self, m: u64) -> Option<Vec<u8>> {
        let full = (1u64 << self.bits) - 1;
        if m > 2 * full {
            return None;
        }
        let (b0, k) = if m > full { (1, m - full) } else { (0, m) };
        let mut bits = vec![b0];
        for i in 1..=self.bits {
            bits.push(((k >> (self.bits - i)) & 1) as u8);
        }
        Some(bits)
    }

    /// Bits of the lattice point closest to `value` (clamped to the range).
    pub fn nearest_bits(&self, value: f64) -> Vec<u8> {
        let full = (1u64 << self.bits) - 1;
        let m = (value / self.step()).round().clamp(0.0, (2 * full) as f64) as u64;
        self.lattice_bits(m).expect("clamped to range")
    }
}

/// A [`BinaryEncoding`] placed on consecutive model variables.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVar {
    pub encoding: BinaryEncoding,
    pub vars: Vec<usize>,
}

impl EncodedVar {
    pub fn register(model: &mut QuboModel, encoding: BinaryEncoding, prefix: &str) -> Self {
        let vars = (0..encoding.n_vars())
            .map(|i| model.add_variable(format!("{prefix}_{i}")))
            .collect();
        Self { encoding, vars }
    }

    pub fn terms(&self, sign: f64) -> Vec<(usize, f64)> {
        self.vars
            .iter()
            .zip(self.encoding.weights())
            .map(|(&v, w)| (v, sign * w))
            .collect()
    }

    pub fn decode(&self, assignment: &[u8]) -> f64 {
        let bits: Vec<u8> = self.vars.iter().map(|&v| assignment[v]).collect();
        self.encoding.decode(&bits)
    }

    pub fn write(&self, assignment: &mut [u8], bits: &[u8]) {
        for (&v, &b) in self.vars.iter().zip(bits) {
            assignment[v] = b;
        }
    }
}

/// Outcome of splitting a multi-cut master into single-cut subproblems.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    /// Elements on which every subproblem solution agrees.
    pub agreement: Vec<usize>,
    /// Remaining elements, left to the reduced problem.
    pub free: Vec<usize>,
    /// Greedy solution of each single-cut subproblem, in cut order.
    pub subproblem_layouts: Vec<DesignVector>,
    /// `R^j = fᵀu^j − Σ_{i∈I} w̃_i^j (ρ̃_i − ρ_i^j)` per cut.
    pub residual_constants: Vec<f64>,
    /// Solid elements still to place on the free set.
    pub reduced_target: usize,
    pub n_elements: usize,
}

impl SplitResult {
    /// `Ṽ = c̃ / n_ρ`.
    pub fn reduced_volume(&self) -> f64 {
        self.reduced_target as f64 / self.n_elements as f64
    }

    /// Agreed values on the agreement set, void elsewhere.
    pub fn base_layout(&self) -> DesignVector {
        let mut base = DesignVector::void(self.n_elements);
        let first = &self.subproblem_layouts[0];
        for &i in &self.agreement {
            base.set(i, first.get(i));
        }
        base
    }
}

/// Solves every single-cut subproblem at `target` solid elements and splits
/// the elements into the agreement set and the free set.
pub fn compute_split(cuts: &[&CutRecord], target: usize) -> Result<SplitResult, QuboError> {
    let first = cuts.first().ok_or(QuboError::NoCuts)?;
    let n = first.layout.len();
    let layouts: Vec<DesignVector> = cuts
        .iter()
        .map(|c| {
            let lp = VolumeLP::from_cut(c, target).expect("cut weights are finite and target within range");
            solve_greedy(&lp)
        })
        .collect();
    let (agreement, free): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| layouts.iter().all(|l| l.get(i) == layouts[0].get(i)));
    let residual_constants = cuts
        .iter()
        .map(|c| {
            let shift: f64 = agreement
                .iter()
                .map(|&i| c.sensitivities[i] * (layouts[0].value(i) - c.layout.value(i)))
                .sum();
            c.compliance - shift
        })
        .collect();
    let fixed_solid = agreement.iter().filter(|&&i| layouts[0].get(i)).count();
    Ok(SplitResult {
        agreement,
        free,
        subproblem_layouts: layouts,
        residual_constants,
        reduced_target: target - fixed_solid,
        n_elements: n,
    })
}

/// Bit counts and penalty multipliers for the master QUBO. Penalties are
/// `multiplier × U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuboParams {
    pub n_eta: usize,
    pub n_alpha: usize,
    pub cut_penalty: f64,
    pub volume_penalty: f64,
}

impl Default for QuboParams {
    fn default() -> Self {
        Self {
            n_eta: 10,
            n_alpha: 10,
            cut_penalty: 1.0,
            volume_penalty: 1.0,
        }
    }
}

/// A master-problem QUBO together with what is needed to read it back.
#[derive(Debug, Clone)]
pub struct MasterQubo {
    pub model: QuboModel,
    /// Element index of design variable `k` (model variable `k`).
    pub free_elements: Vec<usize>,
    /// Fixed values on the agreement set, void on the free set.
    pub base_layout: DesignVector,
    pub eta: EncodedVar,
    pub slacks: Vec<EncodedVar>,
    pub reduced_target: usize,
    pub upper_bound: f64,
    /// Per cut: constant `R^j + Σ_{free} w̃_i ρ_i^j` of the equality residual.
    cut_offsets: Vec<f64>,
    /// Per cut: `w̃_i` on the free elements.
    cut_weights: Vec<Vec<f64>>,
    n_elements: usize,
}

/// Decoded master solution.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterSolution {
    pub layout: DesignVector,
    pub eta: f64,
    pub slacks: Vec<f64>,
    /// Solid count on the free set minus the required count.
    pub volume_violation: i64,
    /// `cut_j(ρ) + α̃^j − η̃` per cut.
    pub cut_residuals: Vec<f64>,
}

impl MasterQubo {
    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn decode(&self, assignment: &[u8]) -> Result<MasterSolution, QuboError> {
        if assignment.len() != self.model.n_vars() {
            return Err(QuboError::LengthMismatch {
                expected: self.model.n_vars(),
                got: assignment.len(),
            });
        }
        let mut layout = self.base_layout.clone();
        for (k, &e) in self.free_elements.iter().enumerate() {
            layout.set(e, assignment[k] != 0);
        }
        let eta = self.eta.decode(assignment);
        let slacks: Vec<f64> = self.slacks.iter().map(|s| s.decode(assignment)).collect();
        let solid_free = (0..self.free_elements.len()).filter(|&k| assignment[k] != 0).count();
        let cut_residuals = self
            .cut_offsets
            .iter()
            .zip(&self.cut_weights)
            .zip(&slacks)
            .map(|((&off, w), &a)| {
                let lin: f64 = w.iter().enumerate().filter(|&(k, _)| assignment[k] != 0).map(|(_, v)| v).sum();
                off - lin + a - eta
            })
            .collect();
        Ok(MasterSolution {
            layout,
            eta,
            slacks,
            volume_violation: solid_free as i64 - self.reduced_target as i64,
            cut_residuals,
        })
    }

    /// Assignment with the given free-set layout and bit patterns for `η` and
    /// each slack.
    pub fn assignment(&self, free_bits: &[u8], eta_bits: &[u8], slack_bits: &[Vec<u8>]) -> Vec<u8> {
        let mut x = vec![0u8; self.model.n_vars()];
        x[..free_bits.len()].copy_from_slice(free_bits);
        self.eta.write(&mut x, eta_bits);
        for (s, b) in self.slacks.iter().zip(slack_bits) {
            s.write(&mut x, b);
        }
        x
    }

    /// Linear cut value `R^j − Σ_{free} w̃_i (ρ_i − ρ_i^j)` for each cut at a
    /// free-set layout.
    pub fn cut_values(&self, free_bits: &[u8]) -> Vec<f64> {
        self.cut_offsets
            .iter()
            .zip(&self.cut_weights)
            .map(|(&off, w)| {
                off - w
                    .iter()
                    .zip(free_bits)
                    .filter(|(_, &b)| b != 0)
                    .map(|(v, _)| v)
                    .sum::<f64>()
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn build_master(
    cuts: &[&CutRecord],
    free: &[usize],
    base_layout: DesignVector,
    residual_constants: &[f64],
    reduced_target: usize,
    n_elements: usize,
    upper_bound: f64,
    params: &QuboParams,
) -> Result<MasterQubo, QuboError> {
    let eta_enc = encode_continuous(upper_bound, params.n_eta)?;
    let alpha_enc = encode_continuous(upper_bound, params.n_alpha)?;
    let mut model = QuboModel::new();
    for &e in free {
        model.add_variable(format!("rho_{e}"));
    }
    let eta = EncodedVar::register(&mut model, eta_enc, "e");
    let slacks: Vec<EncodedVar> = (0..cuts.len())
        .map(|j| EncodedVar::register(&mut model, alpha_enc, &format!("a{j}")))
        .collect();

    // objective η̃(e)
    for (v, w) in eta.terms(1.0) {
        model.add_linear(v, w);
    }

    let a = params.cut_penalty * upper_bound;
    let mut cut_offsets = Vec::with_capacity(cuts.len());
    let mut cut_weights = Vec::with_capacity(cuts.len());
    for (j, cut) in cuts.iter().enumerate() {
        let w: Vec<f64> = free.iter().map(|&e| cut.sensitivities[e]).collect();
        let offset = residual_constants[j]
            + free
                .iter()
                .filter(|&&e| cut.layout.get(e))
                .map(|&e| cut.sensitivities[e])
                .sum::<f64>();
        let mut terms: Vec<(usize, f64)> = w.iter().enumerate().map(|(k, &v)| (k, -v)).collect();
        terms.extend(slacks[j].terms(1.0));
        terms.extend(eta.terms(-1.0));
        model.add_squared_penalty(a, offset, &terms);
        cut_offsets.push(offset);
        cut_weights.push(w);
    }

    // B (Σρ/n − c̃/n)² = B/n² (Σρ − c̃)²
    let b = params.volume_penalty * upper_bound / (n_elements as f64).powi(2);
    let terms: Vec<(usize, f64)> = (0..free.len()).map(|k| (k, 1.0)).collect();
    model.add_squared_penalty(b, -(reduced_target as f64), &terms);

    Ok(MasterQubo {
        model,
        free_elements: free.to_vec(),
        base_layout,
        eta,
        slacks,
        reduced_target,
        upper_bound,
        cut_offsets,
        cut_weights,
        n_elements,
    })
}

/// QUBO of the reduced master over the free set only.
pub fn build_reduced_qubo(
    split: &SplitResult,
    cuts: &[&CutRecord],
    upper_bound: f64,
    params: &QuboParams,
) -> Result<MasterQubo, QuboError> {
    if split.free.is_empty() {
        return Err(QuboError::EmptyFreeSet);
    }
    if cuts.is_empty() {
        return Err(QuboError::NoCuts);
    }
    build_master(
        cuts,
        &split.free,
        split.base_layout(),
        &split.residual_constants,
        split.reduced_target,
        split.n_elements,
        upper_bound,
        params,
    )
}

/// QUBO of the unsplit master over every element.
pub fn build_full_qubo(
    cuts: &[&CutRecord],
    target: usize,
    upper_bound: f64,
    params: &QuboParams,
) -> Result<MasterQubo, QuboError> {
    let first = cuts.first().ok_or(QuboError::NoCuts)?;
    let n = first.layout.len();
    let free: Vec<usize> = (0..n).collect();
    let constants: Vec<f64> = cuts.iter().map(|c| c.compliance).collect();
    build_master(cuts, &free, DesignVector::void(n), &constants, target, n, upper_bound, params)
}

/// Continuous lower bound at a fixed layout: the largest cut value.
pub fn refine_eta(cuts: &[&CutRecord], rho: &DesignVector) -> f64 {
    cuts.iter().map(|c| c.evaluate(rho)).fold(f64::NEG_INFINITY, f64::max)
}

/// Restores `Σρ = target` by toggling free elements: solid ones with the
/// smallest mean sensitivity are removed, void ones with the largest are
/// added. Returns the number of flips.
pub fn repair_volume(layout: &mut DesignVector, free: &[usize], target: usize, cuts: &[&CutRecord]) -> usize {
    let mean = |e: usize| cuts.iter().map(|c| c.sensitivities[e]).sum::<f64>() / cuts.len() as f64;
    let solid = layout.count_solid();
    if solid == target {
        return 0;
    }
    let removing = solid > target;
    let mut candidates: Vec<(f64, usize)> = free
        .iter()
        .filter(|&&e| layout.get(e) == removing)
        .map(|&e| (mean(e), e))
        .collect();
    if removing {
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    } else {
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    }
    let flips = solid.abs_diff(target).min(candidates.len());
    for &(_, e) in &candidates[..flips] {
        layout.set(e, !removing);
    }
    flips
}
