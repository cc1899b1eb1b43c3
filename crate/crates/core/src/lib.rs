//! Tabular recursive classification of examples, with exact oracles,
//! robust example-based control, and reward-model baselines.

pub mod baselines;
pub mod data;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod oracle;
pub mod rce;
pub mod robust;

pub use data::{Collector, EmpiricalKernel, Trajectory, Transition, TransitionDataset};
pub use envs::{make_env, EnvKind, EnvSpec};
pub use error::{LabError, Result};
pub use mdp::{
    control_objective, discounted_occupancy, future_success_prob, Dynamics, OccupancyStart, Policy,
    QTable, SuccessExampleSet, TabularMdp, TaskSpec, TransitionKernel,
};
pub use rce::{Classifier, TrainConfig, TrainMode};
