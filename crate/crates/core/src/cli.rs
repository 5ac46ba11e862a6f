//! Run configuration, artifact writers and the three command bodies used by
//! the `qtopo` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::annealer::{AnnealError, AnnealSchedule, Backend, SampleSet};
use crate::design::DesignVector;
use crate::fem::{BoundaryPreset, ElasticityParams, FemError, FemModel, LinearSolver, LoadCase, MeshSpec};
use crate::gbd::{ContinuationPlan, Fraction, GbdConfig, GbdError, RunResult, Solver};
use crate::qubo::{QuboError, QuboModel, QuboParams};
use crate::sensitivity::{build_kernel, FilterError, VoidScaling};
use crate::toy::{build_toy_qubo, ToySolution, TOY_PENALTY};

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_GUARD_ABORT: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "QTOPO_THREADS";

pub const HISTORY_SCHEMA: &str = "# qtopo-history v1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Gbd(#[from] GbdError),
    #[error(transparent)]
    Qubo(#[from] QuboError),
    #[error(transparent)]
    Anneal(#[from] AnnealError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigParse { .. } => EXIT_USAGE,
            CliError::Anneal(AnnealError::TooManyVariables { .. } | AnnealError::InvalidSchedule(_)) => EXIT_USAGE,
            CliError::Gbd(GbdError::Plan(_)) => EXIT_USAGE,
            CliError::Qubo(QuboError::Parse { .. }) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Exhaustive,
    Sa,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exhaustive" => Ok(BackendKind::Exhaustive),
            "sa" => Ok(BackendKind::Sa),
            other => Err(format!("unknown backend `{other}` (expected exhaustive or sa)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Auto,
    Cholesky,
    Cg,
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(SolverKind::Auto),
            "cholesky" => Ok(SolverKind::Cholesky),
            "cg" => Ok(SolverKind::Cg),
            other => Err(format!("unknown solver `{other}` (expected auto, cholesky or cg)")),
        }
    }
}

/// Every knob of an optimization run. Keys accepted by [`RunConfig::set`]
/// are the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub nelx: usize,
    pub nely: usize,
    pub volume_target: f64,
    pub volume_step: Fraction,
    pub filter_radius: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub n_eta: usize,
    pub n_alpha: usize,
    pub cut_penalty: f64,
    pub volume_penalty: f64,
    pub backend: BackendKind,
    pub reads: usize,
    pub sweeps: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub seed: u64,
    pub bc: BoundaryPreset,
    pub solver: SolverKind,
    pub void_sensitivity_scale: Option<f64>,
    pub void_scaling: VoidScaling,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            nelx: 60,
            nely: 20,
            volume_target: 0.5,
            volume_step: Fraction { num: 1, den: 24 },
            filter_radius: 2.0,
            tolerance: 5e-4,
            max_iterations: 200,
            n_eta: 10,
            n_alpha: 10,
            cut_penalty: 1.0,
            volume_penalty: 1.0,
            backend: BackendKind::Sa,
            reads: 1000,
            sweeps: 1000,
            beta_start: None,
            beta_end: None,
            seed: 0,
            bc: BoundaryPreset::MbbHalf,
            solver: SolverKind::Auto,
            void_sensitivity_scale: None,
            void_scaling: VoidScaling::default(),
            output_dir: PathBuf::from("."),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: {e}"))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>, String> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "nelx" => self.nelx = parse(key, value)?,
            "nely" => self.nely = parse(key, value)?,
            "volume_target" => self.volume_target = parse(key, value)?,
            "volume_step" => self.volume_step = parse(key, value)?,
            "filter_radius" => self.filter_radius = parse(key, value)?,
            "tolerance" => self.tolerance = parse(key, value)?,
            "max_iterations" => self.max_iterations = parse(key, value)?,
            "n_eta" => self.n_eta = parse(key, value)?,
            "n_alpha" => self.n_alpha = parse(key, value)?,
            "cut_penalty" => self.cut_penalty = parse(key, value)?,
            "volume_penalty" => self.volume_penalty = parse(key, value)?,
            "backend" => self.backend = parse(key, value)?,
            "reads" => self.reads = parse(key, value)?,
            "sweeps" => self.sweeps = parse(key, value)?,
            "beta_start" => self.beta_start = parse_optional(key, value)?,
            "beta_end" => self.beta_end = parse_optional(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "bc" => self.bc = parse(key, value)?,
            "solver" => self.solver = parse(key, value)?,
            "void_sensitivity_scale" => self.void_sensitivity_scale = parse_optional(key, value)?,
            "void_scaling" => self.void_scaling = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::ConfigParse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key, value)
                .map_err(|message| CliError::ConfigParse { line: i + 1, message })?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.nelx == 0 || self.nely == 0 {
            return bad(format!("mesh {}x{} is empty", self.nelx, self.nely));
        }
        if !(0.0..=1.0).contains(&self.volume_target) {
            return bad(format!("volume_target {} outside [0, 1]", self.volume_target));
        }
        if !(self.filter_radius >= 1.0 && self.filter_radius.is_finite()) {
            return bad(format!("filter_radius {} must be at least 1", self.filter_radius));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return bad(format!("tolerance {} outside (0, 1)", self.tolerance));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if self.n_eta == 0 || self.n_alpha == 0 || self.n_eta > 40 || self.n_alpha > 40 {
            return bad("n_eta and n_alpha must lie in 1..=40".into());
        }
        if !(self.cut_penalty > 0.0 && self.volume_penalty > 0.0) {
            return bad("penalty multipliers must be positive".into());
        }
        if self.reads == 0 || self.sweeps == 0 {
            return bad("reads and sweeps must be at least 1".into());
        }
        for b in [self.beta_start, self.beta_end].into_iter().flatten() {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("inverse temperature {b} must be positive"));
            }
        }
        if let Some(s) = self.void_sensitivity_scale {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("void_sensitivity_scale {s} outside [0, 1]"));
            }
        }
        self.plan()?;
        Ok(())
    }

    pub fn plan(&self) -> Result<ContinuationPlan, CliError> {
        let plan = ContinuationPlan::new(self.volume_target, self.volume_step)?;
        plan.counts(self.nelx * self.nely)?;
        Ok(plan)
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            reads: self.reads,
            sweeps: self.sweeps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            seed: self.seed,
        }
    }

    pub fn backend(&self) -> Backend {
        match self.backend {
            BackendKind::Exhaustive => Backend::Exhaustive,
            BackendKind::Sa => Backend::Annealing(self.schedule()),
        }
    }

    pub fn gbd_config(&self) -> GbdConfig {
        GbdConfig {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            qubo: QuboParams {
                n_eta: self.n_eta,
                n_alpha: self.n_alpha,
                cut_penalty: self.cut_penalty,
                volume_penalty: self.volume_penalty,
            },
            backend: self.backend(),
            void_sensitivity_scale: self.void_sensitivity_scale,
            void_scaling: self.void_scaling,
        }
    }

    pub fn fem_model(&self) -> Result<FemModel, CliError> {
        let mesh = MeshSpec::new(self.nelx, self.nely)?;
        let load = LoadCase::preset(&mesh, self.bc);
        let solver = match self.solver {
            SolverKind::Auto => LinearSolver::default(),
            SolverKind::Cholesky => LinearSolver::Cholesky,
            SolverKind::Cg => LinearSolver::Cg {
                rel_tol: 1e-10,
                max_iter: None,
            },
        };
        Ok(FemModel::new(mesh, ElasticityParams::default(), load, solver))
    }

    /// Runs the continuation without writing anything.
    pub fn run(&self) -> Result<RunResult, CliError> {
        self.validate()?;
        let fem = self.fem_model()?;
        let kernel = build_kernel(fem.mesh(), self.filter_radius)?;
        let solver = Solver::new(&fem, &kernel, self.gbd_config());
        Ok(solver.run(&self.plan()?)?)
    }
}

/// Plain PGM (P2) with one pixel per element: solid elements are black
/// (pixel 0), void elements white (pixel 1, the maximum grey level).
pub fn layout_pgm(mesh: &MeshSpec, layout: &DesignVector) -> String {
    let mut s = format!("P2\n{} {}\n1\n", mesh.nelx(), mesh.nely());
    for ey in 0..mesh.nely() {
        let row: Vec<&str> = (0..mesh.nelx())
            .map(|ex| if layout.get(mesh.element(ex, ey)) { "0" } else { "1" })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Reads back a layout written by [`layout_pgm`].
pub fn parse_pgm(text: &str) -> Option<(usize, usize, DesignVector)> {
    let mut tokens = text.split_whitespace();
    if tokens.next()? != "P2" {
        return None;
    }
    let nelx: usize = tokens.next()?.parse().ok()?;
    let nely: usize = tokens.next()?.parse().ok()?;
    let _max: u32 = tokens.next()?.parse().ok()?;
    let mut layout = DesignVector::void(nelx * nely);
    for ey in 0..nely {
        for ex in 0..nelx {
            let px: u32 = tokens.next()?.parse().ok()?;
            layout.set(ex * nely + ey, px == 0);
        }
    }
    Some((nelx, nely, layout))
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-iteration log. Deterministic for a fixed configuration; timings go
/// to [`timings_csv`].
pub fn history_csv(result: &RunResult) -> String {
    let mut s = String::new();
    s.push_str(HISTORY_SCHEMA);
    s.push('\n');
    let c = result.counts;
    let _ = writeln!(
        s,
        "# programs initial={} single_cut={} subproblems={} qubo={}",
        c.initial, c.single_cut, c.subproblems, c.qubo
    );
    s.push_str("stage,target,k,compliance,upper,eta,gap,pareto,free,qubo_vars,master,backend,volume_violation\n");
    for r in &result.history {
        let _ = writeln!(
            s,
            "{},{},{},{:.12e},{:.12e},{:.12e},{:.6e},{},{},{},{},{},{}",
            r.stage,
            r.target,
            r.k,
            r.compliance,
            r.upper,
            r.eta,
            r.gap,
            r.pareto,
            fmt_opt(r.free),
            fmt_opt(r.qubo_vars),
            r.master,
            r.backend.unwrap_or(""),
            r.volume_violation
        );
    }
    s
}

pub fn timings_csv(result: &RunResult) -> String {
    let mut s = String::from("stage,k,wall_seconds\n");
    for r in &result.history {
        let _ = writeln!(s, "{},{},{:.6}", r.stage, r.k, r.wall_seconds);
    }
    s
}

pub fn summary_line(result: &RunResult, n_elements: usize) -> String {
    format!(
        "compliance={:.4} iterations={} volume={}/{}",
        result.compliance,
        result.counts.all(),
        result.layout.count_solid(),
        n_elements
    )
}

/// Runs the optimizer, writes `layout.pgm`, `history.csv` and
/// `timings.csv` into the output directory and prints the summary line.
/// Returns the process exit code.
pub fn cmd_optimize(config: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let result = config.run()?;
    let mesh = MeshSpec::new(config.nelx, config.nely)?;
    write_artifacts(&config.output_dir, &mesh, &result)?;
    writeln!(out, "{}", summary_line(&result, mesh.n_elements()))?;
    if result.converged() {
        Ok(EXIT_CONVERGED)
    } else {
        let last = result.stages.last().map(|s| s.stage).unwrap_or(0);
        writeln!(out, "aborted: stage {last} reached max_iterations={}", config.max_iterations)?;
        Ok(EXIT_GUARD_ABORT)
    }
}

pub fn write_artifacts(dir: &Path, mesh: &MeshSpec, result: &RunResult) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("layout.pgm"), layout_pgm(mesh, &result.layout))?;
    fs::write(dir.join("history.csv"), history_csv(result))?;
    fs::write(dir.join("timings.csv"), timings_csv(result))?;
    Ok(())
}

pub fn solve_toy(n_u: usize, n_alpha1: usize, backend: &Backend) -> Result<ToySolution, CliError> {
    if n_u == 0 || n_alpha1 == 0 {
        return Err(CliError::Usage("bit counts must be at least 1".into()));
    }
    let toy = build_toy_qubo(n_u, n_alpha1, TOY_PENALTY)?;
    let samples = backend.solve(&toy.model)?;
    Ok(toy.decode(&samples.best().assignment))
}

pub fn cmd_toy(n_u: usize, n_alpha1: usize, backend: &Backend, out: &mut dyn Write) -> Result<i32, CliError> {
    let s = solve_toy(n_u, n_alpha1, backend)?;
    writeln!(
        out,
        "u={} v={} w={} t={} alpha1={} alpha2={}",
        s.u, s.v, s.w, s.t, s.alpha1, s.alpha2
    )?;
    Ok(EXIT_CONVERGED)
}

pub fn anneal_file(path: &Path, backend: &Backend) -> Result<(QuboModel, SampleSet), CliError> {
    let file = fs::File::open(path)?;
    let model = QuboModel::from_reader(io::BufReader::new(file))?;
    let samples = backend.solve(&model)?;
    Ok((model, samples))
}

pub fn cmd_anneal(path: &Path, backend: &Backend, out: &mut dyn Write) -> Result<i32, CliError> {
    let (_, samples) = anneal_file(path, backend)?;
    let best = samples.best();
    let bits: String = best.assignment.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
    writeln!(out, "energy={}", best.energy)?;
    writeln!(out, "assignment={bits}")?;
    Ok(EXIT_CONVERGED)
}
