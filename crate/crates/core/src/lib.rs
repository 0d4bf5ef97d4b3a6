#![no_std]

extern crate alloc;

pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod linalg;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod regression;
pub mod rng;
pub mod sampling;
pub mod validation;

pub use error::{Error, Result};
pub use mdp::{FiniteMdp, StateActionDistribution, StateDistribution};
pub use oracle::{PolicyTable, ValueBundle};
pub use policy::{FeatureMap, LogLinearPolicy};
pub use regression::{ErrorReport, RegressionKind, RegressionProblem, RegressionSolution};
pub use rng::{RngStream, StreamRng};
pub use sampling::{RolloutSample, SampleProvider, Sampler, SgdConfig};
pub use diagnostics::{BoundInputs, BoundKind};
pub use driver::{run, run_npg, run_qnpg, Mode, RunConfig, RunTrace, SgdSettings, StepSchedule};
