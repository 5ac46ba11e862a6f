mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{cut_value, invariant_violations, median_free_set, random_layout};
use qtopo::binlp::{solve_greedy, VolumeLP};
use qtopo::cli::{BackendKind, RunConfig};
use qtopo::design::DesignVector;
use qtopo::fem::{BoundaryPreset, ElasticityParams, FemModel, LinearSolver, LoadCase, MeshSpec};
use qtopo::gbd::{make_cut, ContinuationPlan, GbdConfig, MasterKind, ProgramCounts, Solver};
use qtopo::sensitivity::{build_kernel, VoidScaling};

fn small_config() -> RunConfig {
    RunConfig {
        nelx: 16,
        nely: 6,
        volume_step: "1/8".parse().unwrap(),
        reads: 100,
        sweeps: 200,
        ..RunConfig::default()
    }
}

#[test]
fn small_mbb_run_keeps_the_invariants() {
    let config = small_config();
    let run = config.run().unwrap();
    assert!(run.converged());
    assert_eq!(run.stages.len(), 4);
    assert_eq!(run.layout.count_solid(), 48);
    let problems = invariant_violations(&run, config.tolerance);
    assert!(problems.is_empty(), "{problems:?}");
    let counts = run.counts;
    assert_eq!(counts.initial, 4);
    let of = |kind: MasterKind| run.history.iter().filter(|r| r.master == kind).count();
    assert_eq!(of(MasterKind::Greedy), counts.single_cut);
    assert_eq!(of(MasterKind::Qubo) + of(MasterKind::QuboFallback), counts.qubo);
    assert_eq!(counts.all(), counts.initial + counts.single_cut + counts.subproblems + counts.qubo);
    if let Some(m) = median_free_set(&run) {
        assert!(m <= 96);
    }
}

#[test]
fn runs_are_deterministic() {
    let config = small_config();
    let a = config.run().unwrap();
    let b = config.run().unwrap();
    assert_eq!(a.layout, b.layout);
    assert_eq!(a.compliance, b.compliance);
    assert_eq!(a.counts, b.counts);
    let strip = |r: &qtopo::gbd::RunResult| {
        r.history.iter().map(|h| (h.k, h.compliance, h.upper, h.eta, h.master, h.free)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn exhaustive_backend_on_a_tiny_mesh() {
    let config = RunConfig {
        nelx: 4,
        nely: 2,
        volume_step: "1/4".parse().unwrap(),
        backend: BackendKind::Exhaustive,
        n_eta: 2,
        n_alpha: 2,
        filter_radius: 1.5,
        ..RunConfig::default()
    };
    let run = config.run().unwrap();
    let problems = invariant_violations(&run, config.tolerance);
    assert!(problems.is_empty(), "{problems:?}");
    assert_eq!(run.layout.count_solid(), 4);
}

#[test]
fn exhaustive_backend_reports_oversized_masters() {
    let config = RunConfig {
        nelx: 6,
        nely: 2,
        volume_step: "1/4".parse().unwrap(),
        backend: BackendKind::Exhaustive,
        n_eta: 3,
        n_alpha: 3,
        filter_radius: 1.5,
        ..RunConfig::default()
    };
    let err = config.run().unwrap_err();
    assert!(err.to_string().contains("use the annealing backend"), "{err}");
}

#[test]
fn full_volume_target_keeps_the_solid_layout() {
    let config = RunConfig {
        nelx: 8,
        nely: 4,
        volume_target: 1.0,
        ..RunConfig::default()
    };
    let run = config.run().unwrap();
    assert!(run.stages.is_empty() && run.history.is_empty());
    assert_eq!(run.layout, DesignVector::solid(32));
    let solid = config.fem_model().unwrap().analyze(&DesignVector::solid(32)).unwrap().compliance;
    assert_eq!(run.compliance, solid);
    assert_eq!(run.counts, ProgramCounts::default());
}

#[test]
fn iteration_limit_stops_the_run_after_the_first_open_stage() {
    let config = RunConfig {
        max_iterations: 1,
        tolerance: 1e-12,
        ..small_config()
    };
    let run = config.run().unwrap();
    assert!(!run.converged());
    let last = run.stages.last().unwrap();
    assert!(!last.converged);
    assert!(run.stages[..run.stages.len() - 1].iter().all(|s| s.converged));
}

fn mbb(nelx: usize, nely: usize) -> FemModel {
    let mesh = MeshSpec::new(nelx, nely).unwrap();
    let load = LoadCase::preset(&mesh, BoundaryPreset::MbbHalf);
    FemModel::new(mesh, ElasticityParams::default(), load, LinearSolver::Cholesky)
}

#[test]
fn cut_is_tight_at_its_own_layout_and_nonnegative() {
    let fem = mbb(10, 4);
    let kernel = build_kernel(fem.mesh(), 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for mode in [VoidScaling::Outer, VoidScaling::Inner] {
        for _ in 0..10 {
            let rho = random_layout(&mut rng, 40, 30);
            let a = fem.analyze(&rho).unwrap();
            let cut = make_cut(&a, &rho, &kernel, 1e-9, mode, 3);
            assert_eq!(cut.iteration, 3);
            assert_eq!(cut_value(&cut, &rho), a.compliance);
            // rounding in the element matrix allows negative energies of
            // order ε_mach ‖K_e‖ ‖u‖² for elements in rigid motion
            let u2 = a.displacements.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).powi(2);
            assert!(cut.sensitivities.iter().all(|&w| w >= -1e-13 * u2));
        }
    }
}

#[test]
fn first_stage_removes_the_least_sensitive_elements() {
    let fem = mbb(12, 4);
    let kernel = build_kernel(fem.mesh(), 2.0).unwrap();
    let rho = DesignVector::solid(48);
    let a = fem.analyze(&rho).unwrap();
    let cut = make_cut(&a, &rho, &kernel, 1e-9, VoidScaling::Inner, 0);
    let next = solve_greedy(&VolumeLP::from_cut(&cut, 44).unwrap());
    let kept_min = (0..48).filter(|&i| next.get(i)).map(|i| cut.sensitivities[i]).fold(f64::INFINITY, f64::min);
    let removed_max = (0..48).filter(|&i| !next.get(i)).map(|i| cut.sensitivities[i]).fold(f64::NEG_INFINITY, f64::max);
    assert!(removed_max <= kept_min);
}

#[test]
fn inner_loop_from_a_start_layout_converges_with_a_bounded_gap() {
    let fem = mbb(12, 4);
    let kernel = build_kernel(fem.mesh(), 2.0).unwrap();
    let config = GbdConfig {
        backend: qtopo::annealer::Backend::Annealing(qtopo::annealer::AnnealSchedule {
            reads: 100,
            sweeps: 200,
            ..Default::default()
        }),
        ..GbdConfig::default()
    };
    let solver = Solver::new(&fem, &kernel, config);
    let start = DesignVector::from((0..48).map(|i| i % 4 != 0).collect::<Vec<bool>>());
    let mut history = Vec::new();
    let mut counts = ProgramCounts::default();
    let sub = solver.gbd_sub(1, 36, start, &mut history, &mut counts).unwrap();
    assert!(sub.converged);
    assert_eq!(sub.state.incumbent.count_solid(), 36);
    let best = sub.state.cuts.iter().map(|c| c.compliance).fold(f64::INFINITY, f64::min);
    assert_eq!(sub.state.upper, best);
    assert_eq!(fem.analyze(&sub.state.incumbent).unwrap().compliance, best);
    assert!(history.windows(2).all(|w| w[1].upper <= w[0].upper));
    assert_eq!(counts.initial, 0);
    let plan = ContinuationPlan::new(0.75, "1/4".parse().unwrap()).unwrap();
    assert_eq!(plan.counts(48).unwrap(), vec![36]);
}
