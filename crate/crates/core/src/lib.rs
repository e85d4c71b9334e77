//! Exact and simulated analysis of marginal, pseudo-marginal and auxiliary
//! Metropolis–Hastings kernels on finite and gridded state spaces.

pub mod config;
pub mod drift;
pub mod engine;
pub mod kernels;
pub mod numerics;
pub mod scenario;
pub mod spectral;
pub mod suite;
pub mod target;
pub mod weights;

pub use kernels::{JointKernelMatrix, JointState, KernelError, KernelKind};
pub use target::{ModelError, ModelSpec, ProposalKernel, State, StateSpace, TargetDistribution};
pub use weights::{GridSpec, StateParam, WeightError, WeightFamily, WeightGrid};
pub use spectral::{SpectralError, SpectralReport, Spectrum, VarianceReport};
pub use engine::{ChainConfig, ChainTrace, EngineError, EstimatorOutput, InitialState, Sampler};
pub use drift::{DriftError, DriftForm, DriftReport, DriftSpec, Region, VSpec};
pub use config::{Experiment, ExperimentKind, ScenarioConfig};
pub use scenario::{run_experiment, ExperimentOutcome};
pub use suite::{randomized_suite, SuiteConfig, SuiteReport};

/// Any failure surfaced by the scenario layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("inequality `{check}` violated with slack {slack:.3e}")]
    InequalityViolated {
        check: String,
        slack: f64,
        /// JSON serialization of the offending instance.
        instance: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Drift(#[from] DriftError),
}
