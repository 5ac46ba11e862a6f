#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use qtopo::cut::CutRecord;
use qtopo::design::DesignVector;
use qtopo::qubo::QuboModel;

/// Uniformly random layout with exactly `count` solid elements.
pub fn random_layout<R: Rng>(rng: &mut R, n: usize, count: usize) -> DesignVector {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut rho = DesignVector::void(n);
    for &i in &idx[..count] {
        rho.set(i, true);
    }
    rho
}

/// Cut with random data; a third of the sensitivities are small integers so
/// ties are common.
pub fn random_cut<R: Rng>(rng: &mut R, n: usize, target: usize) -> CutRecord {
    CutRecord {
        iteration: 1,
        compliance: rng.gen_range(1.0..100.0),
        layout: random_layout(rng, n, target),
        sensitivities: (0..n)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    rng.gen_range(0..4) as f64
                } else {
                    rng.gen_range(0.0..5.0)
                }
            })
            .collect(),
    }
}

/// Every layout of `n` elements with `count` solid ones.
pub fn layouts_with_count(n: usize, count: usize) -> Vec<DesignVector> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == count)
        .map(|m| DesignVector::from(((0..n).map(|i| m >> i & 1 == 1)).collect::<Vec<bool>>()))
        .collect()
}

/// Direct evaluation of `fᵀu^j − Σ w̃_i (ρ_i − ρ_i^j)` over all elements.
pub fn cut_value(cut: &CutRecord, rho: &DesignVector) -> f64 {
    cut.compliance
        - (0..rho.len())
            .map(|i| cut.sensitivities[i] * (rho.value(i) - cut.layout.value(i)))
            .sum::<f64>()
}

/// Random QUBO with coefficients uniform in `[-1, 1)` and the given edge
/// density.
pub fn random_qubo<R: Rng>(rng: &mut R, n: usize, density: f64) -> QuboModel {
    let mut m = QuboModel::new();
    for i in 0..n {
        m.add_variable(format!("x{i}"));
    }
    m.add_constant(rng.gen_range(-1.0..1.0));
    for i in 0..n {
        m.add_linear(i, rng.gen_range(-1.0..1.0));
        for j in i + 1..n {
            if rng.gen_bool(density) {
                m.add_quadratic(i, j, rng.gen_range(-1.0..1.0));
            }
        }
    }
    m
}

/// Independent energy evaluation through the public coefficient views.
pub fn brute_energy(m: &QuboModel, x: &[u8]) -> f64 {
    let mut e = m.constant();
    for (i, &v) in m.linear().iter().enumerate() {
        e += v * x[i] as f64;
    }
    for (i, j, v) in m.quadratic() {
        e += v * (x[i] * x[j]) as f64;
    }
    e
}

/// Plain minimum over all assignments, without Gray-code tricks.
pub fn brute_minimum(m: &QuboModel) -> f64 {
    let n = m.n_vars();
    (0u64..1 << n)
        .map(|mask| {
            let x: Vec<u8> = (0..n).map(|i| (mask >> i & 1) as u8).collect();
            brute_energy(m, &x)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Minimum of the cut over every layout with exactly `count` solid elements,
/// by enumerating all `2ⁿ` subsets with an incremental weight sum.
pub fn enumerated_cut_minimum(cut: &CutRecord, count: usize) -> f64 {
    let n = cut.sensitivities.len();
    assert!(n <= 24);
    let base = cut.compliance
        + (0..n).map(|i| cut.sensitivities[i] * cut.layout.value(i)).sum::<f64>();
    let mut gain = vec![0.0f64; 1 << n];
    let mut best = f64::INFINITY;
    if count == 0 {
        best = base;
    }
    for mask in 1usize..1 << n {
        let low = mask.trailing_zeros() as usize;
        gain[mask] = gain[mask & (mask - 1)] + cut.sensitivities[low];
        if mask.count_ones() as usize == count {
            best = best.min(base - gain[mask]);
        }
    }
    best
}

/// Dense Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Cuts with dyadic data (multiples of `1/4`) so cut values are exact in
/// floating point; each layout has `target` solid elements.
pub fn dyadic_cuts<R: Rng>(rng: &mut R, n: usize, target: usize, count: usize) -> Vec<CutRecord> {
    (0..count)
        .map(|j| CutRecord {
            iteration: j + 1,
            compliance: 0.25 * rng.gen_range(32..48) as f64,
            layout: random_layout(rng, n, target),
            sensitivities: (0..n).map(|_| 0.25 * rng.gen_range(0..5) as f64).collect(),
        })
        .collect()
}

/// Free-set bit pattern with `count` ones.
pub fn random_bits<R: Rng>(rng: &mut R, n: usize, count: usize) -> Vec<u8> {
    random_layout(rng, n, count).iter().map(u8::from).collect()
}

use qtopo::annealer::solve_exhaustive;
use qtopo::qubo::{build_reduced_qubo, compute_split, MasterQubo, QuboParams, SplitResult};

/// Two cuts over `n` elements whose single-cut solutions disagree on at
/// most `max_free` (and at least one) elements. Sensitivities are kept below
/// `U/n²` so the volume penalty dominates any sensitivity gain.
pub fn small_reduced_instance<R: Rng>(rng: &mut R, max_free: usize) -> (Vec<CutRecord>, usize, f64) {
    loop {
        let n = rng.gen_range(8..=14);
        let target = rng.gen_range(2..n - 1);
        let upper = 1.0;
        let cap = upper / (n * n) as f64;
        let cuts: Vec<CutRecord> = (0..2)
            .map(|j| CutRecord {
                iteration: j + 1,
                compliance: rng.gen_range(0.8..1.0) * upper,
                layout: random_layout(rng, n, target),
                sensitivities: (0..n).map(|_| rng.gen_range(0.0..cap)).collect(),
            })
            .collect();
        let refs: Vec<&CutRecord> = cuts.iter().collect();
        let split = compute_split(&refs, target).unwrap();
        if !split.free.is_empty() && split.free.len() <= max_free {
            return (cuts, target, upper);
        }
    }
}

/// Exact optimum of the reduced master: enumerate free-set layouts with the
/// reduced count and take the largest cut value of each.
pub fn reduced_optimum(q: &MasterQubo, split: &SplitResult) -> f64 {
    let k = split.free.len();
    (0u32..1 << k)
        .filter(|m| m.count_ones() as usize == split.reduced_target)
        .map(|m| {
            let bits: Vec<u8> = (0..k).map(|i| (m >> i & 1) as u8).collect();
            q.cut_values(&bits).into_iter().fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Solves one random reduced master exhaustively and compares with the
/// enumerated optimum. Returns `(qubo layout value, optimum, resolution)`.
pub fn reduced_exactness_case<R: Rng>(rng: &mut R) -> Result<(f64, f64, f64), String> {
    let (cuts, target, upper) = small_reduced_instance(rng, 8);
    let refs: Vec<&CutRecord> = cuts.iter().collect();
    let split = compute_split(&refs, target).unwrap();
    let params = QuboParams {
        n_eta: 4,
        n_alpha: 4,
        ..QuboParams::default()
    };
    let q = build_reduced_qubo(&split, &refs, upper, &params).unwrap();
    let samples = solve_exhaustive(&q.model).map_err(|e| e.to_string())?;
    let sol = q.decode(&samples.best().assignment).unwrap();
    if sol.volume_violation != 0 {
        return Err(format!("QUBO minimum violates the volume count by {}", sol.volume_violation));
    }
    let free_bits: Vec<u8> = split.free.iter().map(|&e| u8::from(sol.layout.get(e))).collect();
    let got = q.cut_values(&free_bits).into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok((got, reduced_optimum(&q, &split), upper / 16.0))
}

/// A random master with dyadic data plus an assignment that satisfies every
/// encoded equality exactly. Returns the QUBO, the assignment and `η̃`.
pub fn feasible_master_assignment<R: Rng>(rng: &mut R, q: &MasterQubo, split: &SplitResult) -> Option<(Vec<u8>, f64)> {
    let free_bits = random_bits(rng, split.free.len(), split.reduced_target);
    let values = q.cut_values(&free_bits);
    let step = q.eta.encoding.step();
    let top = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let eta_m = (top / step).round() as u64 + rng.gen_range(0..4);
    let eta = eta_m as f64 * step;
    let eta_bits = q.eta.encoding.lattice_bits(eta_m)?;
    let mut slack_bits = Vec::new();
    for (v, s) in values.iter().zip(&q.slacks) {
        let a = eta - v;
        if a < 0.0 {
            return None;
        }
        slack_bits.push(s.encoding.lattice_bits((a / step).round() as u64)?);
    }
    Some((q.assignment(&free_bits, &eta_bits, &slack_bits), eta))
}

/// Random reduced master over dyadic cuts with `U = 16` and six bits, so the
/// encoding step is `1/4` and feasible assignments are exact.
pub fn dyadic_master<R: Rng>(rng: &mut R) -> (SplitResult, MasterQubo) {
    loop {
        let n = rng.gen_range(6..=16);
        let target = rng.gen_range(1..n);
        let count = rng.gen_range(2..=3);
        let cuts = dyadic_cuts(rng, n, target, count);
        let refs: Vec<&CutRecord> = cuts.iter().collect();
        let split = compute_split(&refs, target).unwrap();
        if split.free.is_empty() {
            continue;
        }
        let params = QuboParams {
            n_eta: 6,
            n_alpha: 6,
            ..QuboParams::default()
        };
        let q = build_reduced_qubo(&split, &refs, 16.0, &params).unwrap();
        return (split, q);
    }
}

/// Number of `instances` random `n`-bit QUBOs on which SA with the given
/// read count and default sweeps reaches the exhaustive ground energy.
pub fn sa_ground_state_matches(seed: u64, instances: usize, n: usize, reads: usize) -> usize {
    use qtopo::annealer::{solve_sa, AnnealSchedule};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .filter(|&k| {
            let m = random_qubo(&mut rng, n, 0.5);
            let exact = solve_exhaustive(&m).unwrap().best().energy;
            let schedule = AnnealSchedule {
                reads,
                seed: k as u64,
                ..AnnealSchedule::default()
            };
            let sa = solve_sa(&m, &schedule).unwrap().best().energy;
            sa <= exact + 1e-9 * exact.abs().max(1.0)
        })
        .count()
}

/// Problems found when checking a run against the loop invariants: upper
/// bound non-increasing within a stage, terminal gap below the tolerance on
/// converged stages, every cut at its stage's solid count, non-negative gaps
/// on single-cut masters and a final layout at the last stage's count.
pub fn invariant_violations(run: &qtopo::gbd::RunResult, tolerance: f64) -> Vec<String> {
    use qtopo::gbd::MasterKind;
    let mut problems = Vec::new();
    for s in &run.stages {
        let recs: Vec<_> = run.history.iter().filter(|r| r.stage == s.stage).collect();
        if recs.len() != s.iterations {
            problems.push(format!("stage {}: {} records for {} iterations", s.stage, recs.len(), s.iterations));
        }
        for w in recs.windows(2) {
            if w[1].upper > w[0].upper {
                problems.push(format!("stage {} k={}: upper bound rose", s.stage, w[1].k));
            }
        }
        for r in &recs {
            if r.master == MasterKind::Greedy && r.gap < 0.0 {
                problems.push(format!("stage {} k={}: negative single-cut gap {}", s.stage, r.k, r.gap));
            }
        }
        if s.converged && recs.last().is_none_or(|r| r.gap >= tolerance) {
            problems.push(format!("stage {}: converged without a terminal gap below {tolerance}", s.stage));
        }
    }
    for (i, &(solid, target)) in run.cut_volumes.iter().enumerate() {
        if solid != target {
            problems.push(format!("cut {i}: {solid} solid elements, stage requires {target}"));
        }
    }
    if let Some(last) = run.stages.last() {
        if run.layout.count_solid() != last.target {
            problems.push(format!("final layout has {} solid, expected {}", run.layout.count_solid(), last.target));
        }
    }
    problems
}

/// Median free-set size over the QUBO masters of a run.
pub fn median_free_set(run: &qtopo::gbd::RunResult) -> Option<usize> {
    let mut sizes: Vec<usize> = run
        .history
        .iter()
        .filter(|r| r.qubo_vars.is_some())
        .filter_map(|r| r.free)
        .collect();
    sizes.sort_unstable();
    (!sizes.is_empty()).then(|| sizes[sizes.len() / 2])
}
