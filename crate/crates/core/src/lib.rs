//! Binary topology optimization by Benders decomposition with QUBO master
//! problems.

pub mod annealer;
pub mod binlp;
pub mod cli;
pub mod cut;
pub mod design;
pub mod fem;
pub mod gbd;
pub mod qubo;
pub mod sensitivity;
pub mod toy;

pub use annealer::{AnnealSchedule, Backend, Sample, SampleSet};
pub use design::DesignVector;
pub use fem::{BoundaryPreset, ElasticityParams, FemModel, LinearSolver, LoadCase, MeshSpec};
pub use gbd::{ContinuationPlan, Fraction, GbdConfig, RunResult, Solver};
pub use qubo::{QuboModel, QuboParams};
