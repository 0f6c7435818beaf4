//! Built-in continuous-control tasks, offline datasets, the replay buffer and
//! mixed batch sampling.

mod buffer;
mod dataset;
mod env;
mod io;

pub use buffer::{mixed_batch, mixed_batch_indices, Batch, ReplayBuffer};
pub use dataset::{generate_dataset, min_max_normalize, Dataset, Trajectory, Transition};
pub use env::{
    clipped_action_count, env_reset, env_step, rollout, ActionPolicy, EnvSpec, RewardKind,
    ScriptedBehavior, StepOutcome, UniformRandomPolicy,
};
pub use io::{load_dataset, save_dataset};
