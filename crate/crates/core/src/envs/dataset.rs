use super::env::{rollout, ActionPolicy, EnvSpec, RewardKind};
use crate::numkit::derive_seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s2: Vec<f64>,
    pub done: bool,
    pub traj_id: u64,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Observed discounted return-to-go from each step.
    pub mc_returns: Vec<f64>,
    /// Discounted return from the first step.
    pub ret: f64,
    pub success: bool,
}

/// Backward recursion `G_t = r_t + γ G_{t+1}`, with nothing after the last step.
pub(crate) fn monte_carlo_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

impl Trajectory {
    pub fn new(spec: &EnvSpec, transitions: Vec<Transition>) -> Result<Trajectory> {
        let last = transitions
            .last()
            .ok_or_else(|| Error::invalid("trajectory has no transitions"))?;
        for tr in &transitions {
            if tr.s.len() != spec.state_dim
                || tr.s2.len() != spec.state_dim
                || tr.a.len() != spec.action_dim
            {
                return Err(Error::shape(format!(
                    "transition (traj {}, t {}) does not match {} dims",
                    tr.traj_id, tr.t, spec.name
                )));
            }
        }
        let success = spec.is_success(last);
        let rewards: Vec<f64> = transitions.iter().map(|t| t.r).collect();
        let mc_returns = monte_carlo_returns(&rewards, spec.gamma);
        Ok(Trajectory {
            ret: mc_returns[0],
            mc_returns,
            transitions,
            success,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }

    /// Quantity that `w` normalizes: discounted return, or success for sparse tasks.
    pub fn outcome(&self, kind: RewardKind) -> f64 {
        match kind {
            RewardKind::Dense => self.ret,
            RewardKind::SparseBinary => {
                if self.success {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Min-max normalization; a constant input maps to all ones.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Immutable offline dataset with outcome labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: EnvSpec,
    pub trajectories: Vec<Trajectory>,
    /// One label per transition, in flattened order.
    pub w_labels: Vec<f64>,
    starts: Vec<usize>,
}

impl Dataset {
    pub fn new(env: EnvSpec, trajectories: Vec<Trajectory>) -> Result<Dataset> {
        env.validate()?;
        if trajectories.is_empty() {
            return Err(Error::invalid("dataset needs at least one trajectory"));
        }
        let outcomes: Vec<f64> = trajectories
            .iter()
            .map(|t| t.outcome(env.reward_kind))
            .collect();
        let per_traj = min_max_normalize(&outcomes);
        let mut w_labels = Vec::new();
        let mut starts = Vec::with_capacity(trajectories.len());
        for (traj, w) in trajectories.iter().zip(&per_traj) {
            if traj.is_empty() {
                return Err(Error::invalid("dataset contains an empty trajectory"));
            }
            starts.push(w_labels.len());
            w_labels.extend(std::iter::repeat_n(*w, traj.len()));
        }
        Ok(Dataset {
            env,
            trajectories,
            w_labels,
            starts,
        })
    }

    /// Total number of transitions.
    pub fn len(&self) -> usize {
        self.w_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_labels.is_empty()
    }

    fn locate(&self, index: usize) -> (usize, usize) {
        let traj = self.starts.partition_point(|&s| s <= index) - 1;
        (traj, index - self.starts[traj])
    }

    /// Transition, its w label and its Monte-Carlo return by flat index.
    pub fn get(&self, index: usize) -> Option<(&Transition, f64, f64)> {
        if index >= self.len() {
            return None;
        }
        let (ti, step) = self.locate(index);
        let traj = &self.trajectories[ti];
        Some((&traj.transitions[step], self.w_labels[index], traj.mc_returns[step]))
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn success_rate(&self) -> f64 {
        let n = self.trajectories.len() as f64;
        self.trajectories.iter().filter(|t| t.success).count() as f64 / n
    }

    pub fn mean_undiscounted_return(&self) -> f64 {
        let n = self.trajectories.len() as f64;
        self.trajectories
            .iter()
            .map(Trajectory::undiscounted_return)
            .sum::<f64>()
            / n
    }
}

/// Rolls out `behavior` for `n_trajectories` episodes. Deterministic per seed.
pub fn generate_dataset<P: ActionPolicy + ?Sized>(
    spec: &EnvSpec,
    behavior: &P,
    n_trajectories: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_trajectories == 0 {
        return Err(Error::invalid("n_trajectories must be at least 1"));
    }
    let trajectories = (0..n_trajectories)
        .map(|i| rollout(spec, behavior, derive_seed(seed, &[i as u64]), i as u64))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(spec.clone(), trajectories)
}
