use rand::Rng;
use rand_distr::StandardNormal;

use super::agent::{AgentState, StepStats, PHASE_EVAL, PHASE_OFFLINE, PHASE_ONLINE, PHASE_WARM};
use super::config::{ExperimentConfig, OfflineAlg, OnlineAlg};
use super::eval::{evaluate_policy, EvalResult, SampledPolicy};
use super::metrics::{MetricsLog, Phase};
use crate::diffusion::{train_score_model, ScoreModel};
use crate::envs::{
    env_reset, env_step, generate_dataset, mixed_batch, rollout, Batch, Dataset, EnvSpec, ReplayBuffer, ScriptedBehavior,
    Transition,
};
use crate::numkit::{derive_seed, rng_from_seed, Matrix};
use crate::optim::OptimizerKind;
use crate::{Error, Result};

/// Trajectory ids of online episodes start here so they never collide with
/// dataset ids.
const ONLINE_TRAJ_BASE: u64 = 1 << 40;

pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}-{}-{}-s{}", cfg.env, cfg.offline_alg, cfg.online_alg, seed)
}

/// Noisy scripted-expert dataset described by `cfg.dataset`.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let env = cfg.env_spec()?;
    let noise = cfg.dataset.behavior_noise.unwrap_or_else(|| env.default_behavior_noise());
    let behavior = ScriptedBehavior {
        env: env.clone(),
        noise_std: noise,
    };
    generate_dataset(&env, &behavior, cfg.dataset.trajectories, cfg.dataset.seed)
}

/// Fits ε_ω on the dataset's (s, a, w) triples; w is forced to 1 when RvS
/// conditioning is off.
pub fn train_diffusion(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(ScoreModel, Vec<f64>)> {
    let env = &dataset.env;
    let n = dataset.len();
    let mut s = Vec::with_capacity(n * env.state_dim);
    let mut a = Vec::with_capacity(n * env.action_dim);
    for tr in dataset.transitions() {
        s.extend_from_slice(&tr.s);
        a.extend_from_slice(&tr.a);
    }
    let w = if cfg.rvs_enabled {
        dataset.w_labels.clone()
    } else {
        vec![1.0; n]
    };
    let d = &cfg.diffusion;
    let model = ScoreModel::new(env.state_dim, env.action_dim, &d.model, d.train.seed)?;
    train_score_model(
        &model,
        &Matrix::from_vec(n, env.state_dim, s)?,
        &Matrix::from_vec(n, env.action_dim, a)?,
        &w,
        &d.train,
    )
}

/// Uniform dataset minibatch (with Monte-Carlo returns).
pub fn offline_batch(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Batch> {
    mixed_batch(dataset, &ReplayBuffer::unbounded(), batch_size, 1.0, seed)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: AgentState,
    pub metrics: MetricsLog,
    /// (step, evaluation) pairs in order.
    pub evals: Vec<(u64, EvalResult)>,
}

fn log_stats(log: &mut MetricsLog, run: &str, phase: Phase, step: u64, stats: &StepStats) {
    for (name, v) in stats.entries() {
        log.push(run, phase, step, name, v);
    }
}

fn log_eval(log: &mut MetricsLog, run: &str, phase: Phase, step: u64, e: &EvalResult) {
    log.push(run, phase, step, "eval_return", e.mean);
    log.push(run, phase, step, "eval_stderr", e.stderr);
}

/// Seed of every greedy evaluation in a run, so evaluations at different
/// steps share start states.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, &[PHASE_EVAL])
}

fn check_offline(cfg: &ExperimentConfig, dataset: &Dataset, score_model: Option<&ScoreModel>) -> Result<EnvSpec> {
    let env = cfg.env_spec()?;
    if dataset.env.name != env.name {
        return Err(Error::Config(format!(
            "dataset is for {} but the config names {}",
            dataset.env.name, env.name
        )));
    }
    if cfg.offline_alg == OfflineAlg::Smac {
        let m = score_model.ok_or_else(|| Error::Config("SMAC needs a trained score model".into()))?;
        if m.state_dim != env.state_dim || m.action_dim != env.action_dim {
            return Err(Error::Config("score model dimensions do not match the environment".into()));
        }
    }
    Ok(env)
}

/// Offline pre-training from a fresh initialization for `cfg.offline_steps`
/// steps, followed by a greedy evaluation.
pub fn offline_pretrain(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    score_model: Option<&ScoreModel>,
    seed: u64,
) -> Result<RunOutput> {
    let env = check_offline(cfg, dataset, score_model)?;
    let state = AgentState::init(cfg, &env, seed)?;
    offline_resume(state, cfg, dataset, score_model, cfg.offline_steps as u64)
}

/// Continues offline training of `state` until `until` total steps.
pub fn offline_resume(
    mut state: AgentState,
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    score_model: Option<&ScoreModel>,
    until: u64,
) -> Result<RunOutput> {
    let env = check_offline(cfg, dataset, score_model)?;
    let run = run_id(cfg, state.seed);
    let mut metrics = MetricsLog::default();
    while state.offline_step < until {
        let step = state.offline_step;
        let batch = offline_batch(dataset, cfg.offline_batch, derive_seed(state.seed, &[PHASE_OFFLINE, step, 0]))?;
        let stats = state.offline_update(cfg, &batch, score_model)?;
        if (step + 1).is_multiple_of(cfg.eval_every as u64) {
            log_stats(&mut metrics, &run, Phase::Offline, step + 1, &stats);
        }
    }
    let e = evaluate_policy(&state.policy, &env, cfg.eval_episodes, eval_seed(state.seed))?;
    log_eval(&mut metrics, &run, Phase::Offline, state.offline_step, &e);
    Ok(RunOutput {
        state,
        metrics,
        evals: vec![(until, e)],
    })
}

/// Fills a buffer with exactly `count` transitions from the frozen policy's
/// stochastic rollouts.
pub fn warm_start(state: &AgentState, env: &EnvSpec, count: usize, seed: u64) -> Result<ReplayBuffer> {
    if count == 0 {
        return Err(Error::invalid("warm start needs count ≥ 1"));
    }
    let mut buffer = ReplayBuffer::unbounded();
    let actor = SampledPolicy(&state.policy);
    let mut episode = 0u64;
    while buffer.len() < count {
        let traj = rollout(
            env,
            &actor,
            derive_seed(seed, &[PHASE_WARM, episode]),
            ONLINE_TRAJ_BASE + episode,
        )?;
        for tr in traj.transitions {
            if buffer.len() == count {
                break;
            }
            buffer.push(tr);
        }
        episode += 1;
    }
    Ok(buffer)
}

/// Exploration action: a policy sample for stochastic learners, the mean
/// plus clipped Gaussian noise for deterministic ones.
fn explore(state: &AgentState, cfg: &ExperimentConfig, s: &[f64], seed: u64) -> Result<Vec<f64>> {
    match cfg.online_alg {
        OnlineAlg::Sac | OnlineAlg::Awr => state.policy.act(s, seed),
        OnlineAlg::Td3 | OnlineAlg::Td3bc => {
            let p = &state.policy;
            let mut a = p.act_greedy(s)?;
            let mut rng = rng_from_seed(seed);
            for (j, v) in a.iter_mut().enumerate() {
                let h = 0.5 * (p.high[j] - p.low[j]);
                let z: f64 = rng.sample(StandardNormal);
                *v = (*v + cfg.exploration_noise * h * z).clamp(p.low[j], p.high[j]);
            }
            Ok(a)
        }
    }
}

/// Warm start, then `cfg.online_steps` iterations of {act, store, one
/// gradient step on a mixed batch}, evaluating at step 0 and every
/// `cfg.eval_every` steps. Optimizers restart as Adam.
pub fn online_finetune(checkpoint: &AgentState, cfg: &ExperimentConfig, dataset: &Dataset) -> Result<RunOutput> {
    let env = cfg.env_spec()?;
    if dataset.env.name != env.name {
        return Err(Error::Config("dataset and config name different environments".into()));
    }
    if checkpoint.policy.state_dim() != env.state_dim
        || checkpoint.policy.action_dim() != env.action_dim
        || checkpoint.critics.input_dim() != env.state_dim + env.action_dim
    {
        return Err(Error::Config("checkpoint shapes do not match the environment".into()));
    }
    let mut state = checkpoint.clone();
    state.reset_optimizers(cfg, OptimizerKind::Adam);
    let seed = state.seed;
    let run = run_id(cfg, seed);
    let mut metrics = MetricsLog::default();
    let mut evals = Vec::new();
    let mut buffer = warm_start(&state, &env, cfg.warm_start_count, seed)?;
    let es = eval_seed(seed);
    let e0 = evaluate_policy(&state.policy, &env, cfg.eval_episodes, es)?;
    log_eval(&mut metrics, &run, Phase::Online, 0, &e0);
    evals.push((0, e0));

    let mut episode = 0u64;
    let mut t_in_episode = 0usize;
    let mut s = env_reset(&env, derive_seed(seed, &[PHASE_ONLINE, u64::MAX, episode]))?;
    for t in 0..cfg.online_steps as u64 {
        let a = explore(&state, cfg, &s, derive_seed(seed, &[PHASE_ONLINE, t, 2]))?;
        let out = env_step(&env, &s, &a)?;
        buffer.push(Transition {
            s: s.clone(),
            a: out.action,
            r: out.reward,
            s2: out.next_state.clone(),
            done: out.done,
            traj_id: ONLINE_TRAJ_BASE + (1 << 32) + episode,
            t: t_in_episode,
        });
        t_in_episode += 1;
        if out.done || t_in_episode == env.horizon {
            episode += 1;
            t_in_episode = 0;
            s = env_reset(&env, derive_seed(seed, &[PHASE_ONLINE, u64::MAX, episode]))?;
        } else {
            s = out.next_state;
        }
        let batch = mixed_batch(dataset, &buffer, cfg.online_batch, cfg.mix, derive_seed(seed, &[PHASE_ONLINE, t, 0]))?;
        let stats = state.online_update(cfg, &batch)?;
        let done = t + 1;
        if done % cfg.eval_every as u64 == 0 || done == cfg.online_steps as u64 {
            log_stats(&mut metrics, &run, Phase::Online, done, &stats);
            let e = evaluate_policy(&state.policy, &env, cfg.eval_episodes, es)?;
            log_eval(&mut metrics, &run, Phase::Online, done, &e);
            evals.push((done, e));
        }
    }
    metrics.push(&run, Phase::Online, cfg.online_steps as u64, "buffer_size", buffer.len() as f64);
    Ok(RunOutput { state, metrics, evals })
}
