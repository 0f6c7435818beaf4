use rand::Rng;

use crate::agents::GaussianPolicy;
use crate::envs::{rollout, ActionPolicy, EnvSpec, ScriptedBehavior, UniformRandomPolicy};
use crate::numkit::{derive_seed, SeedRng};
use crate::{Error, Result};

/// Acts with the policy's mean action.
#[derive(Clone, Copy, Debug)]
pub struct GreedyPolicy<'a>(pub &'a GaussianPolicy);

impl ActionPolicy for GreedyPolicy<'_> {
    fn act(&self, state: &[f64], _rng: &mut SeedRng) -> Result<Vec<f64>> {
        self.0.act_greedy(state)
    }
}

/// Acts with reparameterized samples; the noise seed comes from the rollout rng.
#[derive(Clone, Copy, Debug)]
pub struct SampledPolicy<'a>(pub &'a GaussianPolicy);

impl ActionPolicy for SampledPolicy<'_> {
    fn act(&self, state: &[f64], rng: &mut SeedRng) -> Result<Vec<f64>> {
        self.0.act(state, rng.random())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation / √n).
    pub stderr: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> EvalResult {
        let (mean, stderr) = mean_stderr(&returns);
        EvalResult { mean, stderr, returns }
    }
}

/// Mean and standard error; the error is 0 for fewer than two values.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Undiscounted episodic returns of `episodes` rollouts; episode i starts
/// from `env_reset(derive_seed(seed, [i]))`.
pub fn evaluate_actor<P: ActionPolicy + ?Sized>(actor: &P, env: &EnvSpec, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let returns = (0..episodes)
        .map(|i| Ok(rollout(env, actor, derive_seed(seed, &[i as u64]), i as u64)?.undiscounted_return()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_returns(returns))
}

/// Greedy (mean-action) evaluation.
pub fn evaluate_policy(policy: &GaussianPolicy, env: &EnvSpec, episodes: usize, seed: u64) -> Result<EvalResult> {
    evaluate_actor(&GreedyPolicy(policy), env, episodes, seed)
}

/// Returns of the uniform-random policy and the noiseless scripted expert
/// on the same start states.
pub fn reference_returns(env: &EnvSpec, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let random = evaluate_actor(&UniformRandomPolicy { env: env.clone() }, env, episodes, seed)?;
    let expert = evaluate_actor(
        &ScriptedBehavior {
            env: env.clone(),
            noise_std: 0.0,
        },
        env,
        episodes,
        seed,
    )?;
    Ok((random.mean, expert.mean))
}

/// 100·(J − J_random)/(J_expert − J_random).
pub fn normalized_score(j: f64, random: f64, expert: f64) -> f64 {
    100.0 * (j - random) / (expert - random)
}
