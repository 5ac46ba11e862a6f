//! Benders decomposition driver for binary minimum-compliance design.
//!
//! The outer loop walks the volume constraint from full material down to the
//! target in equal steps. At each step a linearized problem around the
//! previous design gives a starting layout, and the inner loop alternates
//! primal solves (finite elements, upper bound) with master problems over the
//! accumulated cuts (lower bound) until the relative gap drops below the
//! tolerance. Masters with a single Pareto cut are solved exactly by greedy
//! selection; larger ones are split and the reduced problem goes to a QUBO
//! backend.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::annealer::{AnnealError, Backend};
use crate::binlp::{objective_value, solve_greedy, volume_count, VolumeLP};
use crate::design::DesignVector;
use crate::fem::{Analysis, FemError, FemModel};
use crate::qubo::{build_reduced_qubo, compute_split, refine_eta, repair_volume, QuboError, QuboParams};
use crate::sensitivity::{filter, FilterKernel, VoidScaling};

pub use crate::cut::CutRecord;

#[derive(Debug, Error)]
pub enum GbdError {
    #[error("invalid continuation plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Qubo(#[from] QuboError),
    #[error(transparent)]
    Anneal(#[from] AnnealError),
}

/// A nonnegative rational number, used for the volume step so that
/// `(1 − V_T)/ΔV` comes out as an exact integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self, String> {
        if den == 0 {
            return Err("denominator must be nonzero".into());
        }
        Ok(Self { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl FromStr for Fraction {
    type Err = String;

    /// Accepts `p/q` or a decimal literal such as `0.05`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((p, q)) = s.split_once('/') {
            let num = p.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?;
            let den = q.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?;
            return Fraction::new(num, den);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(format!("bad decimal `{s}`"));
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| format!("bad decimal `{s}`"))? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| format!("bad decimal `{s}`"))? };
        Fraction::new(int * den + frac, den)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Volume continuation `V_m = 1 − mΔV`, `m = 1..M`, ending at the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationPlan {
    target: f64,
    step: Fraction,
    stages: usize,
}

impl ContinuationPlan {
    pub fn new(target: f64, step: Fraction) -> Result<Self, GbdError> {
        if !(0.0..=1.0).contains(&target) {
            return Err(GbdError::Plan(format!("target volume {target} outside [0, 1]")));
        }
        if target == 1.0 {
            return Ok(Self { target, step, stages: 0 });
        }
        if step.num == 0 {
            return Err(GbdError::Plan("volume step must be positive".into()));
        }
        let m = (1.0 - target) / step.value();
        let stages = m.round();
        if (m - stages).abs() > 1e-9 || stages < 1.0 {
            return Err(GbdError::Plan(format!(
                "(1 - {target}) / {step} = {m} is not a positive integer"
            )));
        }
        Ok(Self {
            target,
            step,
            stages: stages as usize,
        })
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn step(&self) -> Fraction {
        self.step
    }

    /// `V_m`; the last stage returns the target exactly.
    pub fn volume(&self, m: usize) -> f64 {
        if m == self.stages {
            self.target
        } else {
            1.0 - (m as u64 * self.step.num) as f64 / self.step.den as f64
        }
    }

    /// Solid counts per stage, checked to be strictly decreasing.
    pub fn counts(&self, n_elements: usize) -> Result<Vec<usize>, GbdError> {
        let counts: Vec<usize> = (1..=self.stages).map(|m| volume_count(n_elements, self.volume(m))).collect();
        let mut prev = n_elements;
        for (m, &c) in counts.iter().enumerate() {
            if c >= prev {
                return Err(GbdError::Plan(format!(
                    "stage {} does not remove material on a {n_elements}-element mesh; use a larger step",
                    m + 1
                )));
            }
            prev = c;
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbdConfig {
    /// Relative gap `(U − η)/U` at which a stage stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub qubo: QuboParams,
    pub backend: Backend,
    /// Factor applied to the filtered sensitivity of void elements; `None`
    /// uses the model's void stiffness.
    pub void_sensitivity_scale: Option<f64>,
    pub void_scaling: VoidScaling,
}

impl Default for GbdConfig {
    fn default() -> Self {
        Self {
            tolerance: 5e-4,
            max_iterations: 200,
            qubo: QuboParams::default(),
            backend: Backend::Annealing(Default::default()),
            void_sensitivity_scale: None,
            void_scaling: VoidScaling::default(),
        }
    }
}

/// How the master problem of an iteration was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MasterKind {
    /// Single Pareto cut, exact greedy selection.
    Greedy,
    /// Several cuts whose subproblems all agree; no reduced problem needed.
    Agreement,
    /// Split and reduced QUBO.
    Qubo,
    /// The reduced QUBO returned an already-visited layout; replaced by the
    /// greedy solution of the newest cut.
    QuboFallback,
}

impl fmt::Display for MasterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MasterKind::Greedy => "greedy",
            MasterKind::Agreement => "agreement",
            MasterKind::Qubo => "qubo",
            MasterKind::QuboFallback => "qubo-fallback",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub stage: usize,
    pub target: usize,
    pub k: usize,
    /// `fᵀu^k` of the layout solved in this iteration.
    pub compliance: f64,
    pub upper: f64,
    pub eta: f64,
    pub gap: f64,
    pub pareto: usize,
    /// `|I^C|` when the master was split.
    pub free: Option<usize>,
    pub qubo_vars: Option<usize>,
    pub master: MasterKind,
    pub backend: Option<&'static str>,
    /// Solid-count error of the raw QUBO solution before repair.
    pub volume_violation: i64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub volume: f64,
    pub target: usize,
    pub iterations: usize,
    pub converged: bool,
    pub compliance: f64,
}

/// Number of binary programs solved, by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProgramCounts {
    /// Linearized start problems, one per stage.
    pub initial: usize,
    /// Single-cut masters.
    pub single_cut: usize,
    /// Single-cut subproblems solved while splitting.
    pub subproblems: usize,
    /// Reduced QUBO masters.
    pub qubo: usize,
}

impl ProgramCounts {
    /// Start problems plus master problems of either kind.
    pub fn masters_total(&self) -> usize {
        self.initial + self.single_cut + self.qubo
    }

    pub fn all(&self) -> usize {
        self.masters_total() + self.subproblems
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub layout: DesignVector,
    pub compliance: f64,
    pub history: Vec<IterationRecord>,
    pub stages: Vec<StageSummary>,
    pub counts: ProgramCounts,
    /// Every cut layout together with the solid count its stage required.
    pub cut_volumes: Vec<(usize, usize)>,
}

impl RunResult {
    pub fn converged(&self) -> bool {
        self.stages.iter().all(|s| s.converged)
    }
}

/// State of one inner loop.
#[derive(Debug, Clone)]
pub struct GbdState {
    pub cuts: Vec<CutRecord>,
    pub upper: f64,
    pub incumbent: DesignVector,
    pub incumbent_analysis: Option<Analysis>,
    pub eta: f64,
    pub k: usize,
    pub target: usize,
}

impl GbdState {
    pub fn new(target: usize, n_elements: usize) -> Self {
        Self {
            cuts: Vec::new(),
            upper: f64::INFINITY,
            incumbent: DesignVector::void(n_elements),
            incumbent_analysis: None,
            eta: f64::NEG_INFINITY,
            k: 0,
            target,
        }
    }
}

/// Indices `j ≤ k` whose compliance does not exceed that of cut `k`.
pub fn pareto_filter(pool: &[CutRecord], k: usize) -> Vec<usize> {
    let ck = pool[k].compliance;
    (0..=k).filter(|&j| pool[j].compliance <= ck).collect()
}

/// Cut from a solved layout: filtered energies as sensitivities.
pub fn make_cut(
    analysis: &Analysis,
    rho: &DesignVector,
    kernel: &FilterKernel,
    void_scale: f64,
    mode: VoidScaling,
    iteration: usize,
) -> CutRecord {
    CutRecord {
        iteration,
        compliance: analysis.compliance,
        layout: rho.clone(),
        sensitivities: filter(kernel, &analysis.energies, rho, void_scale, mode),
    }
}

/// Everything the loops share.
pub struct Solver<'a> {
    pub fem: &'a FemModel,
    pub kernel: &'a FilterKernel,
    pub config: GbdConfig,
}

/// Result of one inner loop.
#[derive(Debug, Clone)]
pub struct SubResult {
    pub state: GbdState,
    pub converged: bool,
}

impl<'a> Solver<'a> {
    pub fn new(fem: &'a FemModel, kernel: &'a FilterKernel, config: GbdConfig) -> Self {
        Self { fem, kernel, config }
    }

    fn void_scale(&self) -> f64 {
        self.config
            .void_sensitivity_scale
            .unwrap_or_else(|| self.fem.params().void_stiffness())
    }

    /// Inner loop at a fixed solid count, starting from a feasible layout.
    pub fn gbd_sub(
        &self,
        stage: usize,
        target: usize,
        rho1: DesignVector,
        history: &mut Vec<IterationRecord>,
        counts: &mut ProgramCounts,
    ) -> Result<SubResult, GbdError> {
        let n = rho1.len();
        assert_eq!(rho1.count_solid(), target, "start layout must satisfy the volume count");
        let mut state = GbdState::new(target, n);
        let mut rho = rho1;
        let xi = self.config.tolerance;
        for k in 1..=self.config.max_iterations {
            let started = Instant::now();
            state.k = k;
            let analysis = self.fem.analyze(&rho)?;
            let cut = make_cut(&analysis, &rho, self.kernel, self.void_scale(), self.config.void_scaling, k);
            let previous_upper = state.upper;
            if cut.compliance < state.upper {
                state.upper = cut.compliance;
                state.incumbent = rho.clone();
                state.incumbent_analysis = Some(analysis);
            }
            debug_assert!(state.upper <= previous_upper);
            state.cuts.push(cut);
            let newest = state.cuts.len() - 1;
            let pareto = pareto_filter(&state.cuts, newest);
            let pareto_cuts: Vec<&CutRecord> = pareto.iter().map(|&j| &state.cuts[j]).collect();

            let mut free = None;
            let mut qubo_vars = None;
            let mut backend = None;
            let mut violation = 0;
            let (next, eta, master) = if pareto_cuts.len() == 1 {
                counts.single_cut += 1;
                let lp = VolumeLP::from_cut(pareto_cuts[0], target).expect("valid cut");
                let next = solve_greedy(&lp);
                let eta = objective_value(pareto_cuts[0], &next);
                (next, eta, MasterKind::Greedy)
            } else {
                counts.subproblems += pareto_cuts.len();
                let split = compute_split(&pareto_cuts, target)?;
                free = Some(split.free.len());
                if split.free.is_empty() {
                    let next = split.subproblem_layouts[0].clone();
                    let eta = refine_eta(&pareto_cuts, &next);
                    (next, eta, MasterKind::Agreement)
                } else {
                    counts.qubo += 1;
                    let q = build_reduced_qubo(&split, &pareto_cuts, state.upper, &self.config.qubo)?;
                    qubo_vars = Some(q.model.n_vars());
                    backend = Some(self.config.backend.name());
                    let samples = self.config.backend.solve(&q.model)?;
                    let sol = q.decode(&samples.best().assignment)?;
                    violation = sol.volume_violation;
                    let mut next = sol.layout;
                    repair_volume(&mut next, &split.free, target, &pareto_cuts);
                    if state.cuts.iter().any(|c| c.layout == next) && !pareto.iter().any(|&j| state.cuts[j].layout == next) {
                        let lp = VolumeLP::from_cut(&state.cuts[newest], target).expect("valid cut");
                        let next = solve_greedy(&lp);
                        let eta = refine_eta(&pareto_cuts, &next);
                        (next, eta, MasterKind::QuboFallback)
                    } else {
                        let eta = refine_eta(&pareto_cuts, &next);
                        (next, eta, MasterKind::Qubo)
                    }
                }
            };
            debug_assert_eq!(next.count_solid(), target);
            state.eta = eta;
            let gap = (state.upper - eta) / state.upper;
            history.push(IterationRecord {
                stage,
                target,
                k,
                compliance: state.cuts[newest].compliance,
                upper: state.upper,
                eta,
                gap,
                pareto: pareto.len(),
                free,
                qubo_vars,
                master,
                backend,
                volume_violation: violation,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            if gap < xi {
                return Ok(SubResult { state, converged: true });
            }
            rho = next;
        }
        Ok(SubResult { state, converged: false })
    }

    /// Full continuation run from the all-solid layout. Stops after the first
    /// stage that hits the iteration limit.
    pub fn run(&self, plan: &ContinuationPlan) -> Result<RunResult, GbdError> {
        let n = self.fem.mesh().n_elements();
        let counts_per_stage = plan.counts(n)?;
        let mut history = Vec::new();
        let mut stages = Vec::new();
        let mut counts = ProgramCounts::default();
        let mut cut_volumes = Vec::new();
        let mut rho0 = DesignVector::solid(n);
        let mut analysis0 = self.fem.analyze(&rho0)?;
        let mut compliance = analysis0.compliance;

        for (idx, &target) in counts_per_stage.iter().enumerate() {
            let stage = idx + 1;
            let start = make_cut(&analysis0, &rho0, self.kernel, self.void_scale(), self.config.void_scaling, 0);
            counts.initial += 1;
            let rho1 = solve_greedy(&VolumeLP::from_cut(&start, target).expect("valid cut"));
            let first = history.len();
            let sub = self.gbd_sub(stage, target, rho1, &mut history, &mut counts)?;
            for c in &sub.state.cuts {
                cut_volumes.push((c.layout.count_solid(), target));
            }
            compliance = sub.state.upper;
            stages.push(StageSummary {
                stage,
                volume: plan.volume(stage),
                target,
                iterations: history.len() - first,
                converged: sub.converged,
                compliance,
            });
            rho0 = sub.state.incumbent;
            analysis0 = sub.state.incumbent_analysis.expect("at least one primal solve per stage");
            if !sub.converged {
                break;
            }
        }
        Ok(RunResult {
            layout: rho0,
            compliance,
            history,
            stages,
            counts,
            cut_volumes,
        })
    }
}
