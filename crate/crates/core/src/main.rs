use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qtopo::annealer::{AnnealSchedule, Backend};
use qtopo::cli::{self, BackendKind, CliError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "qtopo", version, about = "Binary topology optimization with QUBO master problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the volume continuation and write layout.pgm, history.csv, timings.csv
    Optimize(OptimizeArgs),
    /// Solve the small mixed-integer validation problem
    Toy(ToyArgs),
    /// Minimize a QUBO coefficient file
    Anneal(AnnealArgs),
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    /// key = value configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nelx: Option<String>,
    #[arg(long)]
    nely: Option<String>,
    #[arg(long)]
    volume_target: Option<String>,
    /// Volume step, `p/q` or decimal
    #[arg(long)]
    volume_step: Option<String>,
    #[arg(long)]
    filter_radius: Option<String>,
    #[arg(long)]
    tolerance: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    #[arg(long)]
    n_eta: Option<String>,
    #[arg(long)]
    n_alpha: Option<String>,
    #[arg(long)]
    cut_penalty: Option<String>,
    #[arg(long)]
    volume_penalty: Option<String>,
    /// exhaustive | sa
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    reads: Option<String>,
    #[arg(long)]
    sweeps: Option<String>,
    #[arg(long)]
    beta_start: Option<String>,
    #[arg(long)]
    beta_end: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// mbb-half | cantilever
    #[arg(long)]
    bc: Option<String>,
    /// auto | cholesky | cg
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    void_sensitivity_scale: Option<String>,
    /// outer | inner
    #[arg(long)]
    void_scaling: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
}

impl OptimizeArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("nelx", &self.nelx),
            ("nely", &self.nely),
            ("volume_target", &self.volume_target),
            ("volume_step", &self.volume_step),
            ("filter_radius", &self.filter_radius),
            ("tolerance", &self.tolerance),
            ("max_iterations", &self.max_iterations),
            ("n_eta", &self.n_eta),
            ("n_alpha", &self.n_alpha),
            ("cut_penalty", &self.cut_penalty),
            ("volume_penalty", &self.volume_penalty),
            ("backend", &self.backend),
            ("reads", &self.reads),
            ("sweeps", &self.sweeps),
            ("beta_start", &self.beta_start),
            ("beta_end", &self.beta_end),
            ("seed", &self.seed),
            ("bc", &self.bc),
            ("solver", &self.solver),
            ("void_sensitivity_scale", &self.void_sensitivity_scale),
            ("void_scaling", &self.void_scaling),
            ("output_dir", &self.output_dir),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    fn to_config(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_kv(&fs::read_to_string(path)?)?;
        }
        for (k, v) in self.overrides() {
            config.set(k, v).map_err(CliError::Usage)?;
        }
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long, default_value = "sa")]
    backend: BackendKind,
    #[arg(long, default_value_t = 1000)]
    reads: usize,
    #[arg(long, default_value_t = 1000)]
    sweeps: usize,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScheduleArgs {
    fn backend(&self) -> Backend {
        match self.backend {
            BackendKind::Exhaustive => Backend::Exhaustive,
            BackendKind::Sa => Backend::Annealing(AnnealSchedule {
                reads: self.reads,
                sweeps: self.sweeps,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
                seed: self.seed,
            }),
        }
    }
}

#[derive(Args, Debug)]
struct ToyArgs {
    /// Bits for the continuous variable u
    #[arg(long, default_value_t = 5)]
    n_u: usize,
    /// Bits for the slack of the first inequality
    #[arg(long, default_value_t = 5)]
    n_alpha: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
struct AnnealArgs {
    file: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(cli::THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("{}={v} is not a thread count", cli::THREADS_ENV)))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32, CliError> {
    init_threads()?;
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Optimize(args) => cli::cmd_optimize(&args.to_config()?, &mut stdout),
        Command::Toy(args) => cli::cmd_toy(args.n_u, args.n_alpha, &args.schedule.backend(), &mut stdout),
        Command::Anneal(args) => cli::cmd_anneal(&args.file, &args.schedule.backend(), &mut stdout),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { cli::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
