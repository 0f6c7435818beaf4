use rand::Rng;
use serde::{Deserialize, Serialize};

use super::critic::{critic_inputs, ActionValue, Aggregate, AlphaNet, CriticEnsemble};
use super::policy::GaussianPolicy;
use crate::diffusion::{score_at_k1_batch, EpsPredictor};
use crate::envs::Batch;
use crate::numkit::{backward, backward_dual, derive_seed, forward_cached, forward_tangent, rng_from_seed, Matrix};
use crate::{Error, Result};

/// Seed tags shared by every algorithm so that equal settings consume equal
/// random streams.
pub(crate) const TAG_NEXT_ACTION: u64 = 1;
pub(crate) const TAG_POLICY: u64 = 2;
pub(crate) const TAG_B: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub gamma: f64,
    /// Score-matching weight κ.
    pub kappa: f64,
    pub cql_alpha: f64,
    /// IQL expectile τ.
    pub expectile: f64,
    /// IQL advantage temperature.
    pub iql_beta: f64,
    /// TD3+BC behavior-cloning weight.
    pub bc_weight: f64,
    pub awr_temperature: f64,
    /// Initial entropy coefficient; tuned toward `target_entropy` when set.
    pub entropy_coef: f64,
    pub target_entropy: Option<f64>,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            gamma: 0.99,
            kappa: 40.0,
            cql_alpha: 5.0,
            expectile: 0.9,
            iql_beta: 1.0,
            bc_weight: 2.0,
            awr_temperature: 0.4,
            entropy_coef: 0.1,
            target_entropy: None,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.gamma >= 0.0 && self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (self.kappa >= 0.0 && self.kappa.is_finite(), "kappa must be finite and nonnegative"),
            (self.cql_alpha >= 0.0 && self.cql_alpha.is_finite(), "cql_alpha must be finite and nonnegative"),
            (self.expectile > 0.0 && self.expectile < 1.0, "expectile must lie in (0, 1)"),
            (self.iql_beta > 0.0 && self.iql_beta.is_finite(), "iql_beta must be positive"),
            (self.bc_weight >= 0.0 && self.bc_weight.is_finite(), "bc_weight must be finite and nonnegative"),
            (self.awr_temperature > 0.0 && self.awr_temperature.is_finite(), "awr_temperature must be positive"),
            (self.entropy_coef >= 0.0 && self.entropy_coef.is_finite(), "entropy_coef must be finite and nonnegative"),
            (self.target_entropy.is_none_or(f64::is_finite), "target_entropy must be finite"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }
}

/// Critic loss with one gradient per ensemble member.
#[derive(Clone, Debug)]
pub struct CriticOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub mean_q: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Batch mean of log π on the samples (NaN for deterministic losses).
    pub mean_log_prob: f64,
}

#[derive(Clone, Debug)]
pub struct ScoreMatchOutput {
    pub loss: f64,
    pub critic_grads: Vec<Vec<f64>>,
    pub alpha_grad: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SmacOutput {
    pub loss: f64,
    pub critic_grads: Vec<Vec<f64>>,
    /// Zero-length when κ = 0.
    pub alpha_grad: Vec<f64>,
    pub actor_critic: CriticOutput,
    pub score_match: Option<ScoreMatchOutput>,
}

fn check_batch(batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// Mean over members of mean_b (Q_m(s_b, a_b) − y_b)².
pub(crate) fn critic_regression(ensemble: &CriticEnsemble, states: &Matrix, actions: &Matrix, y: &[f64]) -> Result<CriticOutput> {
    let x = critic_inputs(states, actions)?;
    let n = y.len();
    let scale = 1.0 / (n * ensemble.len()) as f64;
    let mut loss = 0.0;
    let mut mean_q = 0.0;
    let mut grads = Vec::with_capacity(ensemble.len());
    for p in &ensemble.members {
        let (q, cache) = forward_cached(p, &x)?;
        let mut up = vec![0.0; n];
        for i in 0..n {
            let d = q.data()[i] - y[i];
            loss += scale * d * d;
            mean_q += scale * q.data()[i];
            up[i] = 2.0 * scale * d;
        }
        grads.push(backward(p, &cache, &Matrix::from_vec(n, 1, up)?)?.0);
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("critic loss"));
    }
    Ok(CriticOutput { loss, grads, mean_q })
}

/// Bootstrapped targets r + γ(1−d)·v.
pub(crate) fn td_targets(batch: &Batch, gamma: f64, next_values: &[f64]) -> Result<Vec<f64>> {
    let y: Vec<f64> = (0..batch.len())
        .map(|i| batch.rewards[i] + gamma * (1.0 - batch.dones[i]) * next_values[i])
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("bootstrapped target"));
    }
    Ok(y)
}

/// SAC critic loss with target min_m Q̄_m(s′, a′) − α·log π(a′|s′), a′ ~ π.
pub fn sac_critic_loss(
    ensemble: &CriticEnsemble,
    policy: &GaussianPolicy,
    batch: &Batch,
    entropy_coef: f64,
    gamma: f64,
    seed: u64,
) -> Result<CriticOutput> {
    check_batch(batch)?;
    let next = policy.sample(&batch.next_states, derive_seed(seed, &[TAG_NEXT_ACTION]))?;
    let q_next = ensemble.target(Aggregate::Min).value(&batch.next_states, &next.actions)?;
    let soft: Vec<f64> = q_next
        .iter()
        .zip(&next.log_probs)
        .map(|(q, lp)| q - entropy_coef * lp)
        .collect();
    let y = td_targets(batch, gamma, &soft)?;
    critic_regression(ensemble, &batch.states, &batch.actions, &y)
}

/// mean(α·log π(a|s) − Q(s, a)) on reparameterized samples; only φ moves.
pub fn sac_policy_loss<Q: ActionValue + ?Sized>(
    policy: &GaussianPolicy,
    q: &Q,
    states: &Matrix,
    entropy_coef: f64,
    seed: u64,
) -> Result<PolicyOutput> {
    let n = states.rows();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let draw = policy.sample(states, derive_seed(seed, &[TAG_POLICY]))?;
    let (qv, qa) = q.value_and_action_grad(states, &draw.actions)?;
    let inv = 1.0 / n as f64;
    let loss = inv * draw.log_probs.iter().zip(&qv).map(|(lp, q)| entropy_coef * lp - q).sum::<f64>();
    let abar = qa.scale(-inv);
    let lbar = vec![entropy_coef * inv; n];
    let grad = policy.sample_grad(&draw, &abar, &lbar)?;
    Ok(PolicyOutput {
        loss,
        grad,
        mean_log_prob: inv * draw.log_probs.iter().sum::<f64>(),
    })
}

/// Gradient in log α of −log α·(mean log π + target entropy).
pub fn entropy_coef_grad(mean_log_prob: f64, target_entropy: f64) -> f64 {
    -(mean_log_prob + target_entropy)
}

/// Actions from B(s): the first half are policy samples, the second half
/// uniform over the action box. Rows pair with `states`.
pub fn sample_b(policy: &GaussianPolicy, states: &Matrix, seed: u64) -> Result<Matrix> {
    let n = states.rows();
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("B(s) needs an even, nonzero batch size, got {n}")));
    }
    let half = n / 2;
    let mut first = Matrix::zeros(half, states.cols());
    for i in 0..half {
        first.row_mut(i).copy_from_slice(states.row(i));
    }
    let drawn = policy.sample(&first, derive_seed(seed, &[0]))?;
    let dim = policy.action_dim();
    let mut out = Matrix::zeros(n, dim);
    for i in 0..half {
        out.row_mut(i).copy_from_slice(drawn.actions.row(i));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    for i in half..n {
        for j in 0..dim {
            out.set(i, j, rng.random_range(policy.low[j]..policy.high[j]));
        }
    }
    Ok(out)
}

/// L^SM with a given (frozen) score target ε, averaged over members and batch.
pub fn score_match_loss_with_eps(
    ensemble: &CriticEnsemble,
    alpha: &AlphaNet,
    states: &Matrix,
    actions: &Matrix,
    eps: &Matrix,
) -> Result<ScoreMatchOutput> {
    let (n, dim) = (actions.rows(), actions.cols());
    if n == 0 || eps.rows() != n || eps.cols() != dim {
        return Err(Error::shape("score targets must match the action batch"));
    }
    let (alphas, alpha_cache) = forward_cached(&alpha.params, states)?;
    let x = critic_inputs(states, actions)?;
    let sd = states.cols();
    let scale = 1.0 / (n * ensemble.len()) as f64;
    let mut loss = 0.0;
    let mut alpha_bar = vec![0.0; n];
    let mut critic_grads = Vec::with_capacity(ensemble.len());
    for p in &ensemble.members {
        // one tangent pass per action coordinate gives ∂Q/∂a_j
        let mut passes = Vec::with_capacity(dim);
        let mut grads_a = Matrix::zeros(n, dim);
        for j in 0..dim {
            let mut xdot = Matrix::zeros(n, x.cols());
            for i in 0..n {
                xdot.set(i, sd + j, 1.0);
            }
            let (_, ydot, cache) = forward_tangent(p, &x, &xdot)?;
            for i in 0..n {
                grads_a.set(i, j, ydot.data()[i]);
            }
            passes.push(cache);
        }
        if !grads_a.is_finite() {
            return Err(Error::non_finite("action gradient of Q"));
        }
        let mut g = vec![0.0; p.len()];
        let zero = Matrix::zeros(n, 1);
        for (j, cache) in passes.iter().enumerate() {
            let mut up = vec![0.0; n];
            for i in 0..n {
                let r = grads_a.get(i, j) - alphas.data()[i] * eps.get(i, j);
                loss += scale * r * r;
                up[i] = 2.0 * scale * r;
                alpha_bar[i] -= 2.0 * scale * r * eps.get(i, j);
            }
            let (gj, _, _) = backward_dual(p, cache, &zero, &Matrix::from_vec(n, 1, up)?)?;
            for (a, b) in g.iter_mut().zip(&gj) {
                *a += b;
            }
        }
        critic_grads.push(g);
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("score-matching loss"));
    }
    let (alpha_grad, _) = backward(&alpha.params, &alpha_cache, &Matrix::from_vec(n, 1, alpha_bar)?)?;
    Ok(ScoreMatchOutput {
        loss,
        critic_grads,
        alpha_grad,
    })
}

/// L^SM with ε_ω(s, a, w, 1) from a frozen score model.
pub fn score_match_loss<P: EpsPredictor + ?Sized>(
    ensemble: &CriticEnsemble,
    alpha: &AlphaNet,
    score_model: &P,
    states: &Matrix,
    actions: &Matrix,
    w: f64,
) -> Result<ScoreMatchOutput> {
    let eps = score_at_k1_batch(score_model, states, actions, w)?;
    score_match_loss_with_eps(ensemble, alpha, states, actions, &eps)
}

/// κ·L^SM + L^AC. With κ = 0 the result is the SAC critic loss itself and
/// the score model is never queried.
#[allow(clippy::too_many_arguments)]
pub fn smac_critic_loss<P: EpsPredictor + ?Sized>(
    ensemble: &CriticEnsemble,
    alpha: &AlphaNet,
    policy: &GaussianPolicy,
    score_model: &P,
    batch: &Batch,
    entropy_coef: f64,
    gamma: f64,
    kappa: f64,
    seed: u64,
) -> Result<SmacOutput> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::invalid(format!("kappa must be finite and nonnegative, got {kappa}")));
    }
    let ac = sac_critic_loss(ensemble, policy, batch, entropy_coef, gamma, seed)?;
    if kappa == 0.0 {
        return Ok(SmacOutput {
            loss: ac.loss,
            critic_grads: ac.grads.clone(),
            alpha_grad: Vec::new(),
            actor_critic: ac,
            score_match: None,
        });
    }
    let b = sample_b(policy, &batch.states, derive_seed(seed, &[TAG_B]))?;
    let sm = score_match_loss(ensemble, alpha, score_model, &batch.states, &b, 1.0)?;
    let critic_grads = ac
        .grads
        .iter()
        .zip(&sm.critic_grads)
        .map(|(a, s)| a.iter().zip(s).map(|(x, y)| x + kappa * y).collect())
        .collect();
    Ok(SmacOutput {
        loss: ac.loss + kappa * sm.loss,
        critic_grads,
        alpha_grad: sm.alpha_grad.iter().map(|g| kappa * g).collect(),
        actor_critic: ac,
        score_match: Some(sm),
    })
}
