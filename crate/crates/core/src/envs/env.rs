use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Trajectory, Transition};
use crate::numkit::{rng_from_seed, SeedRng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Dense,
    SparseBinary,
}

/// Static description of a task. Dynamics are selected by `name`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub state_low: Vec<f64>,
    pub state_high: Vec<f64>,
    pub horizon: usize,
    pub reward_kind: RewardKind,
    pub gamma: f64,
    /// Upper bound on |reward| for any transition.
    pub reward_bound: f64,
    /// Half-width of the uniform initial-state box; 0 makes `d_0` a point mass.
    pub init_spread: f64,
}

const REACH_GOAL: [f64; 2] = [0.5, 0.5];
const REACH_START: [f64; 2] = [-0.6, -0.6];
const REACH_SUCCESS_RADIUS: f64 = 0.1;
const GATE_GOAL: f64 = 0.8;
const GATE_START: f64 = -0.8;
const STEP_SCALE: f64 = 0.1;
/// Per-step reward of the sparse task until the goal is reached.
pub const SPARSE_STEP_PENALTY: f64 = -1.0;

static CLIPPED_ACTIONS: AtomicU64 = AtomicU64::new(0);

/// Number of out-of-bounds actions clipped by [`env_step`] in this process.
pub fn clipped_action_count() -> u64 {
    CLIPPED_ACTIONS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Reach2d,
    Gate1d,
}

impl EnvSpec {
    pub const BUILTIN: [&'static str; 2] = ["reach2d", "gate1d"];

    /// Looks up a built-in environment.
    pub fn builtin(name: &str) -> Result<EnvSpec> {
        match name {
            "reach2d" => Ok(EnvSpec {
                name: name.into(),
                state_dim: 2,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                state_low: vec![-1.0; 2],
                state_high: vec![1.0; 2],
                horizon: 50,
                reward_kind: RewardKind::Dense,
                gamma: 0.99,
                reward_bound: 2.0 * 2f64.sqrt(),
                init_spread: 0.3,
            }),
            "gate1d" => Ok(EnvSpec {
                name: name.into(),
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                state_low: vec![-1.0],
                state_high: vec![1.0],
                horizon: 22,
                reward_kind: RewardKind::SparseBinary,
                gamma: 0.99,
                reward_bound: 1.0,
                init_spread: 0.2,
            }),
            other => Err(Error::invalid(format!(
                "unknown environment '{other}' (built-ins: {})",
                EnvSpec::BUILTIN.join(", ")
            ))),
        }
    }

    fn task(&self) -> Result<Task> {
        match self.name.as_str() {
            "reach2d" => Ok(Task::Reach2d),
            "gate1d" => Ok(Task::Gate1d),
            other => Err(Error::invalid(format!("unknown environment '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task()?;
        let bounds_ok = |lo: &[f64], hi: &[f64], n: usize| {
            lo.len() == n
                && hi.len() == n
                && lo.iter().zip(hi).all(|(l, h)| l.is_finite() && h.is_finite() && l < h)
        };
        if !bounds_ok(&self.action_low, &self.action_high, self.action_dim) {
            return Err(Error::invalid("action bounds must be finite with low < high"));
        }
        if !bounds_ok(&self.state_low, &self.state_high, self.state_dim) {
            return Err(Error::invalid("state bounds must be finite with low < high"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("discount must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Mean of the initial-state distribution.
    pub fn initial_state_mean(&self) -> Vec<f64> {
        match self.task() {
            Ok(Task::Reach2d) => REACH_START.to_vec(),
            Ok(Task::Gate1d) => vec![GATE_START],
            Err(_) => vec![0.0; self.state_dim],
        }
    }

    pub fn action_center(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn action_half_range(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    /// Whether a finished trajectory counts as a success.
    pub fn is_success(&self, last: &Transition) -> bool {
        match self.task() {
            Ok(Task::Reach2d) => distance(&last.s2, &REACH_GOAL) <= REACH_SUCCESS_RADIUS,
            Ok(Task::Gate1d) => last.done,
            Err(_) => false,
        }
    }

    /// Behavior-policy noise that gives roughly 70% success.
    pub fn default_behavior_noise(&self) -> f64 {
        match self.task() {
            Ok(Task::Reach2d) => 0.8,
            _ => 0.55,
        }
    }

    /// Proportional controller that drives the state to the goal.
    pub fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = match self.task() {
            Ok(Task::Reach2d) => state
                .iter()
                .zip(REACH_GOAL)
                .map(|(p, g)| 10.0 * (g - p))
                .collect(),
            Ok(Task::Gate1d) => vec![5.0 * (GATE_GOAL + 0.1 - state[0])],
            Err(_) => vec![0.0; self.action_dim],
        };
        self.clip_action(&raw)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws an initial state from `d_0`; deterministic per seed.
pub fn env_reset(spec: &EnvSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let mean = spec.initial_state_mean();
    Ok(mean
        .iter()
        .zip(spec.state_low.iter().zip(&spec.state_high))
        .map(|(m, (lo, hi))| {
            let u: f64 = if spec.init_spread > 0.0 {
                rng.random_range(-spec.init_spread..spec.init_spread)
            } else {
                0.0
            };
            (m + u).clamp(*lo, *hi)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The action actually applied (after clipping).
    pub action: Vec<f64>,
}

/// Deterministic dynamics. Out-of-bounds actions are clipped and counted.
pub fn env_step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
    let task = spec.task()?;
    if state.len() != spec.state_dim || action.len() != spec.action_dim {
        return Err(Error::shape(format!(
            "{} expects state {} / action {}, got {} / {}",
            spec.name,
            spec.state_dim,
            spec.action_dim,
            state.len(),
            action.len()
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("action contains a non-finite value"));
    }
    let applied = spec.clip_action(action);
    if applied != action {
        CLIPPED_ACTIONS.fetch_add(1, Ordering::Relaxed);
    }
    let moved: Vec<f64> = state
        .iter()
        .zip(&applied)
        .zip(spec.state_low.iter().zip(&spec.state_high))
        .map(|((s, a), (lo, hi))| (s + STEP_SCALE * a).clamp(*lo, *hi))
        .collect();
    let (reward, done) = match task {
        Task::Reach2d => (-distance(&moved, &REACH_GOAL), false),
        Task::Gate1d => {
            if moved[0] >= GATE_GOAL {
                (0.0, true)
            } else {
                (SPARSE_STEP_PENALTY, false)
            }
        }
    };
    Ok(StepOutcome {
        next_state: moved,
        reward,
        done,
        action: applied,
    })
}

/// Anything that picks actions for a rollout.
pub trait ActionPolicy {
    fn act(&self, state: &[f64], rng: &mut SeedRng) -> Result<Vec<f64>>;
}

/// Scripted expert plus additive Gaussian action noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBehavior {
    pub env: EnvSpec,
    pub noise_std: f64,
}

impl ActionPolicy for ScriptedBehavior {
    fn act(&self, state: &[f64], rng: &mut SeedRng) -> Result<Vec<f64>> {
        let mut a = self.env.expert_action(state);
        if self.noise_std > 0.0 {
            for v in &mut a {
                let n: f64 = StandardNormal.sample(rng);
                *v += self.noise_std * n;
            }
        }
        Ok(self.env.clip_action(&a))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniformRandomPolicy {
    pub env: EnvSpec,
}

impl ActionPolicy for UniformRandomPolicy {
    fn act(&self, _state: &[f64], rng: &mut SeedRng) -> Result<Vec<f64>> {
        Ok(self
            .env
            .action_low
            .iter()
            .zip(&self.env.action_high)
            .map(|(l, h)| rng.random_range(*l..*h))
            .collect())
    }
}

/// Runs one episode from `env_reset(seed)` until termination or the horizon.
pub fn rollout<P: ActionPolicy + ?Sized>(
    spec: &EnvSpec,
    policy: &P,
    seed: u64,
    traj_id: u64,
) -> Result<Trajectory> {
    let mut state = env_reset(spec, seed)?;
    let mut rng = rng_from_seed(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let mut transitions = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let action = policy.act(&state, &mut rng)?;
        let out = env_step(spec, &state, &action)?;
        let done = out.done;
        transitions.push(Transition {
            s: state,
            a: out.action,
            r: out.reward,
            s2: out.next_state.clone(),
            done,
            traj_id,
            t,
        });
        state = out.next_state;
        if done {
            break;
        }
    }
    Trajectory::new(spec, transitions)
}
