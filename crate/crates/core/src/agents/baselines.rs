use rand::Rng;

use super::critic::{critic_inputs, ActionValue, Aggregate, CriticEnsemble, ValueNet};
use super::policy::GaussianPolicy;
use super::sac::{critic_regression, sample_b, td_targets, CriticOutput, LossParams, PolicyOutput, TAG_B, TAG_NEXT_ACTION, TAG_POLICY};
use crate::envs::Batch;
use crate::numkit::{backward, derive_seed, forward_cached, rng_from_seed, Matrix};
use crate::{Error, Result};

/// Upper clip on exponentiated advantage weights.
pub const MAX_ADVANTAGE_WEIGHT: f64 = 100.0;
/// TD3 target smoothing noise, in units of the action half-range.
pub const TD3_NOISE_STD: f64 = 0.2;
pub const TD3_NOISE_CLIP: f64 = 0.5;

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

fn advantage_weight(adv: f64, temperature: f64) -> f64 {
    (adv / temperature).exp().min(MAX_ADVANTAGE_WEIGHT)
}

fn penalty(ensemble: &CriticEnsemble, batch: &Batch, b_actions: &Matrix, cap: Option<&[f64]>) -> Result<CriticOutput> {
    let n = batch.len();
    let xb = critic_inputs(&batch.states, b_actions)?;
    let xd = critic_inputs(&batch.states, &batch.actions)?;
    let scale = 1.0 / (n * ensemble.len()) as f64;
    let mut value = 0.0;
    let mut mean_q = 0.0;
    let mut grads = Vec::with_capacity(ensemble.len());
    for p in &ensemble.members {
        let (qb, cb) = forward_cached(p, &xb)?;
        let (qd, cd) = forward_cached(p, &xd)?;
        let mut up_b = vec![scale; n];
        for i in 0..n {
            let q = qb.data()[i];
            let term = match cap {
                Some(mc) if mc[i] < q => {
                    up_b[i] = 0.0;
                    mc[i]
                }
                _ => q,
            };
            value += scale * (term - qd.data()[i]);
            mean_q += scale * qd.data()[i];
        }
        let (mut g, _) = backward(p, &cb, &Matrix::from_vec(n, 1, up_b)?)?;
        let (gd, _) = backward(p, &cd, &Matrix::from_vec(n, 1, vec![-scale; n])?)?;
        for (a, b) in g.iter_mut().zip(&gd) {
            *a += b;
        }
        grads.push(g);
    }
    if !value.is_finite() {
        return Err(Error::non_finite("conservative penalty"));
    }
    Ok(CriticOutput {
        loss: value,
        grads,
        mean_q,
    })
}

/// mean Q(s, B(s)) − mean Q(s, a_data), averaged over members, with member
/// gradients. B(s) actions are treated as constants.
pub fn cql_penalty(ensemble: &CriticEnsemble, policy: &GaussianPolicy, batch: &Batch, seed: u64) -> Result<CriticOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = sample_b(policy, &batch.states, derive_seed(seed, &[TAG_B]))?;
    penalty(ensemble, batch, &b, None)
}

/// Like [`cql_penalty`] with the B(s) term replaced by min(V^MC(s), Q).
/// Batches without Monte-Carlo returns are rejected.
pub fn calql_penalty(ensemble: &CriticEnsemble, policy: &GaussianPolicy, batch: &Batch, seed: u64) -> Result<CriticOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mc = batch
        .mc_returns
        .as_ref()
        .ok_or_else(|| Error::invalid("CalQL needs Monte-Carlo returns; use CQL for this batch"))?;
    if mc.iter().any(|v| v.is_nan()) {
        return Err(Error::non_finite("Monte-Carlo returns"));
    }
    let b = sample_b(policy, &batch.states, derive_seed(seed, &[TAG_B]))?;
    penalty(ensemble, batch, &b, Some(mc))
}

#[derive(Clone, Debug)]
pub struct IqlOutput {
    pub critic: CriticOutput,
    pub value_loss: f64,
    pub value_grad: Vec<f64>,
    pub policy: PolicyOutput,
}

/// IQL: critics regress onto r + γ(1−d)V(s′); V fits the τ-expectile of
/// u = min Q̄(s, a) − V(s) at dataset actions; the policy maximizes
/// exp(u/β)-weighted log-likelihood of dataset actions.
pub fn iql_losses(
    ensemble: &CriticEnsemble,
    value: &ValueNet,
    policy: &GaussianPolicy,
    batch: &Batch,
    params: &LossParams,
) -> Result<IqlOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let tau = params.expectile;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("expectile {tau} outside (0, 1)")));
    }
    let n = batch.len();
    let inv = 1.0 / n as f64;
    let v_next = value.eval(&batch.next_states)?;
    let y = td_targets(batch, params.gamma, &v_next)?;
    let critic = critic_regression(ensemble, &batch.states, &batch.actions, &y)?;

    let q = ensemble.target(Aggregate::Min).value(&batch.states, &batch.actions)?;
    let mut value_loss = 0.0;
    let mut adv = vec![0.0; n];
    let (vs, value_grad) = value.eval_grad(&batch.states, |i, v| -2.0 * inv * expectile_weight(q[i] - v, tau) * (q[i] - v))?;
    for (i, v) in vs.into_iter().enumerate() {
        let u = q[i] - v;
        value_loss += inv * expectile_weight(u, tau) * u * u;
        adv[i] = u;
    }
    let weights: Vec<f64> = adv.iter().map(|&a| advantage_weight(a, params.iql_beta)).collect();
    let policy = weighted_log_likelihood(policy, batch, &weights)?;
    Ok(IqlOutput {
        critic,
        value_loss,
        value_grad,
        policy,
    })
}

/// −mean_i weight_i·log π(a_i|s_i) with constant weights.
fn weighted_log_likelihood(policy: &GaussianPolicy, batch: &Batch, weights: &[f64]) -> Result<PolicyOutput> {
    let inv = 1.0 / batch.len() as f64;
    let up: Vec<f64> = weights.iter().map(|w| -inv * w).collect();
    let (lp, grad) = policy.log_prob_grad(&batch.states, &batch.actions, Some(&up))?;
    let loss = lp.iter().zip(&up).map(|(l, u)| l * u).sum::<f64>();
    Ok(PolicyOutput {
        loss,
        grad,
        mean_log_prob: inv * lp.iter().sum::<f64>(),
    })
}

#[derive(Clone, Debug)]
pub struct Td3Output {
    pub critic: CriticOutput,
    pub policy: PolicyOutput,
}

/// TD3 on the policy's mean action: critics regress onto
/// r + γ(1−d)·min Q̄(s′, clip(μ(s′) + ε)), with ε ~ N(0, (0.2h)²) clipped to
/// ±0.5h per coordinate of half-range h, and the policy minimizes
/// −mean min Q(s, μ(s)). `smoothing = false` sets ε = 0.
pub fn td3_losses(
    ensemble: &CriticEnsemble,
    policy: &GaussianPolicy,
    batch: &Batch,
    gamma: f64,
    smoothing: bool,
    seed: u64,
) -> Result<Td3Output> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut next = policy.mean_action(&batch.next_states)?;
    if smoothing {
        let mut rng = rng_from_seed(derive_seed(seed, &[TAG_NEXT_ACTION]));
        for i in 0..next.rows() {
            for j in 0..next.cols() {
                let h = 0.5 * (policy.high[j] - policy.low[j]);
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let eps = (TD3_NOISE_STD * h * z).clamp(-TD3_NOISE_CLIP * h, TD3_NOISE_CLIP * h);
                next.set(i, j, (next.get(i, j) + eps).clamp(policy.low[j], policy.high[j]));
            }
        }
    }
    let q_next = ensemble.target(Aggregate::Min).value(&batch.next_states, &next)?;
    let y = td_targets(batch, gamma, &q_next)?;
    let critic = critic_regression(ensemble, &batch.states, &batch.actions, &y)?;
    let policy = deterministic_q_loss(policy, &ensemble.online(Aggregate::Min), &batch.states)?;
    Ok(Td3Output { critic, policy })
}

fn deterministic_q_loss<Q: ActionValue + ?Sized>(policy: &GaussianPolicy, q: &Q, states: &Matrix) -> Result<PolicyOutput> {
    let n = states.rows();
    let inv = 1.0 / n as f64;
    let mu = policy.mean_action(states)?;
    let (qv, qa) = q.value_and_action_grad(states, &mu)?;
    let (_, grad) = policy.mean_action_grad(states, &qa.scale(-inv))?;
    Ok(PolicyOutput {
        loss: -inv * qv.iter().sum::<f64>(),
        grad,
        mean_log_prob: f64::NAN,
    })
}

/// mean[−Q(s, μ(s))/sg(mean|Q|) + β‖μ(s) − a‖²].
pub fn td3bc_policy_loss<Q: ActionValue + ?Sized>(
    q: &Q,
    policy: &GaussianPolicy,
    batch: &Batch,
    beta: f64,
) -> Result<PolicyOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("behavior-cloning weight must be finite and nonnegative, got {beta}")));
    }
    let n = batch.len();
    let inv = 1.0 / n as f64;
    let mu = policy.mean_action(&batch.states)?;
    let (qv, qa) = q.value_and_action_grad(&batch.states, &mu)?;
    let norm = inv * qv.iter().map(|v| v.abs()).sum::<f64>();
    let lambda = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    let mut loss = 0.0;
    let mut abar = Matrix::zeros(n, mu.cols());
    for i in 0..n {
        loss -= inv * lambda * qv[i];
        for j in 0..mu.cols() {
            let d = mu.get(i, j) - batch.actions.get(i, j);
            loss += inv * beta * d * d;
            abar.set(i, j, inv * (-lambda * qa.get(i, j) + 2.0 * beta * d));
        }
    }
    let (_, grad) = policy.mean_action_grad(&batch.states, &abar)?;
    Ok(PolicyOutput {
        loss,
        grad,
        mean_log_prob: f64::NAN,
    })
}

/// −mean min(exp(A/T), 100)·log π(a|s) with
/// A = mean_m Q_m(s, a) − mean_m Q_m(s, a_π), a_π ~ π(s); weights are constants.
pub fn awr_policy_loss(
    ensemble: &CriticEnsemble,
    policy: &GaussianPolicy,
    batch: &Batch,
    temperature: f64,
    seed: u64,
) -> Result<PolicyOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("AWR temperature must be positive, got {temperature}")));
    }
    let view = ensemble.online(Aggregate::Mean);
    let q_data = view.value(&batch.states, &batch.actions)?;
    let draw = policy.sample(&batch.states, derive_seed(seed, &[TAG_POLICY]))?;
    let q_pi = view.value(&batch.states, &draw.actions)?;
    let weights: Vec<f64> = q_data
        .iter()
        .zip(&q_pi)
        .map(|(a, b)| advantage_weight(a - b, temperature))
        .collect();
    weighted_log_likelihood(policy, batch, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::critic::q_values;
    use crate::agents::sac::tests::{batch, ensemble, linear_critic, policy};
    use crate::numkit::finite_diff_check;
    use proptest::prelude::*;

    fn with_member(e: &CriticEnsemble, m: usize, v: &[f64]) -> CriticEnsemble {
        let mut out = e.clone();
        out.members[m] = e.members[m].with_values(v.to_vec()).unwrap();
        out
    }

    fn constant_ensemble(c: f64) -> CriticEnsemble {
        let q = linear_critic(&[0.0, 0.0], c);
        CriticEnsemble::from_parts(vec![q.clone(), q.clone()], vec![q.clone(), q]).unwrap()
    }

    #[test]
    fn cql_hand_case() {
        let e = ensemble(2);
        let p = policy(3);
        let b = batch(4, 5);
        let out = cql_penalty(&e, &p, &b, 7).unwrap();
        let ba = sample_b(&p, &b.states, derive_seed(7, &[TAG_B])).unwrap();
        let mut manual = 0.0;
        for m in &e.members {
            let qb = q_values(m, &b.states, &ba).unwrap();
            let qd = q_values(m, &b.states, &b.actions).unwrap();
            for i in 0..4 {
                manual += (qb[i] - qd[i]) / 8.0;
            }
        }
        assert!((out.loss - manual).abs() <= 1e-12);
        assert!(cql_penalty(&constant_ensemble(3.0), &p, &b, 1).unwrap().loss.abs() < 1e-15);
    }

    #[test]
    fn cql_sign_when_data_actions_score_higher() {
        // Q = ⟨v, a⟩ rewards actions near the corner (1, 1)
        let q = linear_critic(&[1.0, 1.0], 0.0);
        let e = CriticEnsemble::from_parts(vec![q.clone(), q.clone()], vec![q.clone(), q]).unwrap();
        let mut b = batch(6, 1);
        b.actions = Matrix::from_rows(&vec![vec![1.0, 1.0]; 6]).unwrap();
        assert!(cql_penalty(&e, &policy(2), &b, 3).unwrap().loss < 0.0);
    }

    #[test]
    fn calql_hand_case_and_sentinel() {
        let q = linear_critic(&[1.0, 0.0], 0.0);
        let e = CriticEnsemble::from_parts(vec![q.clone(), q.clone()], vec![q.clone(), q]).unwrap();
        let p = policy(1);
        let mut b = batch(2, 4);
        let ba = sample_b(&p, &b.states, derive_seed(9, &[TAG_B])).unwrap();
        // cap the first B-action's value, leave the second free
        let cap0 = ba.get(0, 0) - 0.25;
        b.mc_returns = Some(vec![cap0, 10.0]);
        let out = calql_penalty(&e, &p, &b, 9).unwrap();
        let manual = (cap0 + ba.get(1, 0) - b.actions.get(0, 0) - b.actions.get(1, 0)) / 2.0;
        assert!((out.loss - manual).abs() <= 1e-12);

        b.mc_returns = Some(vec![f64::INFINITY; 2]);
        let cal = calql_penalty(&e, &p, &b, 9).unwrap();
        let cql = cql_penalty(&e, &p, &b, 9).unwrap();
        assert_eq!(cal.loss, cql.loss);
        assert_eq!(cal.grads, cql.grads);

        b.mc_returns = None;
        assert!(calql_penalty(&e, &p, &b, 9).is_err());
    }

    #[test]
    fn penalty_gradients_match_fd() {
        let e = ensemble(11);
        let p = policy(12);
        let mut b = batch(6, 13);
        b.mc_returns = Some(vec![-0.2, 0.1, 5.0, -5.0, 0.0, 0.3]);
        for use_mc in [false, true] {
            let eval = |e: &CriticEnsemble| {
                if use_mc {
                    calql_penalty(e, &p, &b, 4)
                } else {
                    cql_penalty(e, &p, &b, 4)
                }
                .unwrap()
            };
            let out = eval(&e);
            for m in 0..2 {
                let r = finite_diff_check(|v| eval(&with_member(&e, m, v)).loss, &out.grads[m], e.members[m].values(), 1e-6, None);
                assert!(r.max_rel_error <= 1e-5, "{r:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn calql_never_exceeds_cql(seed in 0u64..1_000_000, mc in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let e = ensemble(seed % 17);
            let p = policy(seed % 5);
            let mut b = batch(4, seed);
            b.mc_returns = Some(mc);
            let cal = calql_penalty(&e, &p, &b, seed).unwrap().loss;
            let cql = cql_penalty(&e, &p, &b, seed).unwrap().loss;
            prop_assert!(cal <= cql);
        }
    }

    #[test]
    fn expectile_weights_and_symmetry() {
        assert_eq!(expectile_weight(1.0, 0.9), 0.9);
        assert!((expectile_weight(-1.0, 0.9) - 0.1).abs() < 1e-15);
        // τ = 0.5: value loss equals half the mean squared difference
        let e = ensemble(1);
        let v = ValueNet::new(2, &[4], crate::numkit::Activation::Tanh, 2).unwrap();
        let p = policy(3);
        let b = batch(8, 9);
        let params = LossParams {
            expectile: 0.5,
            ..LossParams::default()
        };
        let out = iql_losses(&e, &v, &p, &b, &params).unwrap();
        let q = e.target(Aggregate::Min).value(&b.states, &b.actions).unwrap();
        let vs = v.eval(&b.states).unwrap();
        let mse = q.iter().zip(&vs).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 8.0;
        assert!((out.value_loss - 0.5 * mse).abs() < 1e-14);
    }

    #[test]
    fn expectile_of_two_points_is_tau() {
        // minimize over a grid: E|τ − 1{x−v<0}|(x−v)² for x ∈ {0, 1}
        let tau = 0.9;
        let loss = |v: f64| {
            [0.0f64, 1.0]
                .iter()
                .map(|x| {
                    let u = x - v;
                    expectile_weight(u, tau) * u * u
                })
                .sum::<f64>()
        };
        let best = (0..=10_000).map(|i| i as f64 / 10_000.0).min_by(|a, b| loss(*a).total_cmp(&loss(*b))).unwrap();
        assert!((best - 0.9).abs() < 1e-4);
    }

    #[test]
    fn iql_gradients_match_fd() {
        let e = ensemble(21);
        let v = ValueNet::new(2, &[5], crate::numkit::Activation::Tanh, 3).unwrap();
        let p = policy(4);
        let b = batch(6, 22);
        let params = LossParams::default();
        let out = iql_losses(&e, &v, &p, &b, &params).unwrap();
        for m in 0..2 {
            let r = finite_diff_check(
                |x| iql_losses(&with_member(&e, m, x), &v, &p, &b, &params).unwrap().critic.loss,
                &out.critic.grads[m],
                e.members[m].values(),
                1e-6,
                None,
            );
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
        }
        let r = finite_diff_check(
            |x| {
                let vv = ValueNet::from_params(v.params.with_values(x.to_vec()).unwrap()).unwrap();
                iql_losses(&e, &vv, &p, &b, &params).unwrap().value_loss
            },
            &out.value_grad,
            v.params.values(),
            1e-6,
            None,
        );
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
        let r = finite_diff_check(
            |x| {
                let pp = p.with_params(p.params.with_values(x.to_vec()).unwrap()).unwrap();
                iql_losses(&e, &v, &pp, &b, &params).unwrap().policy.loss
            },
            &out.policy.grad,
            p.params.values(),
            1e-6,
            None,
        );
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn td3_zero_noise_and_gradients() {
        let e = ensemble(31);
        let p = policy(32);
        let b = batch(6, 33);
        let out = td3_losses(&e, &p, &b, 0.9, false, 1).unwrap();
        let mu = p.mean_action(&b.next_states).unwrap();
        let qn = e.target(Aggregate::Min).value(&b.next_states, &mu).unwrap();
        let y = td_targets(&b, 0.9, &qn).unwrap();
        let manual = critic_regression(&e, &b.states, &b.actions, &y).unwrap();
        assert_eq!(out.critic.loss, manual.loss);

        let noisy = td3_losses(&e, &p, &b, 0.9, true, 1).unwrap();
        assert_ne!(noisy.critic.loss, out.critic.loss);
        let r = finite_diff_check(
            |x| {
                let pp = p.with_params(p.params.with_values(x.to_vec()).unwrap()).unwrap();
                td3_losses(&e, &pp, &b, 0.9, true, 1).unwrap().policy.loss
            },
            &noisy.policy.grad,
            p.params.values(),
            1e-6,
            None,
        );
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
        for m in 0..2 {
            let r = finite_diff_check(
                |x| td3_losses(&with_member(&e, m, x), &p, &b, 0.9, true, 1).unwrap().critic.loss,
                &noisy.critic.grads[m],
                e.members[m].values(),
                1e-6,
                None,
            );
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
        }
        let flat = td3_losses(&constant_ensemble(1.5), &p, &b, 0.9, true, 1).unwrap();
        assert!(flat.policy.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn td3bc_hand_case_and_gradient() {
        let q = linear_critic(&[1.0, -2.0], 0.5);
        let e = CriticEnsemble::from_parts(vec![q.clone(), q.clone()], vec![q.clone(), q]).unwrap();
        let p = policy(5);
        let b = batch(2, 6);
        let out = td3bc_policy_loss(&e.online(Aggregate::Min), &p, &b, 2.5).unwrap();
        let mu = p.mean_action(&b.states).unwrap();
        let qv: Vec<f64> = (0..2).map(|i| 0.5 + mu.get(i, 0) - 2.0 * mu.get(i, 1)).collect();
        let norm = (qv[0].abs() + qv[1].abs()) / 2.0;
        let mut manual = 0.0;
        for i in 0..2 {
            manual += -qv[i] / norm / 2.0;
            for j in 0..2 {
                manual += 2.5 * (mu.get(i, j) - b.actions.get(i, j)).powi(2) / 2.0;
            }
        }
        assert!((out.loss - manual).abs() <= 1e-12);

        let e = ensemble(7);
        let view = e.online(Aggregate::Min);
        let out = td3bc_policy_loss(&view, &p, &b, 2.5).unwrap();
        // the normalizer is a stop-gradient, so freeze it at the base point
        let mu = p.mean_action(&b.states).unwrap();
        let base = view.value(&b.states, &mu).unwrap();
        let norm = base.iter().map(|v| v.abs()).sum::<f64>() / 2.0;
        let r = finite_diff_check(
            |x| {
                let pp = p.with_params(p.params.with_values(x.to_vec()).unwrap()).unwrap();
                let m = pp.mean_action(&b.states).unwrap();
                let q = view.value(&b.states, &m).unwrap();
                (0..2)
                    .map(|i| {
                        -q[i] / norm / 2.0
                            + (0..2).map(|j| 2.5 * (m.get(i, j) - b.actions.get(i, j)).powi(2) / 2.0).sum::<f64>()
                    })
                    .sum::<f64>()
            },
            &out.grad,
            p.params.values(),
            1e-6,
            None,
        );
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn td3bc_constant_q_is_pure_cloning() {
        let p = policy(8);
        let b = batch(4, 2);
        let out = td3bc_policy_loss(&constant_ensemble(-3.0).online(Aggregate::Min), &p, &b, 1.0).unwrap();
        let bc = td3bc_policy_loss(&constant_ensemble(-3.0).online(Aggregate::Min), &p, &b, 0.0).unwrap();
        assert!((bc.loss - 1.0).abs() < 1e-15);
        assert!(bc.grad.iter().all(|g| *g == 0.0));
        assert!(out.loss > 1.0);
    }

    #[test]
    fn awr_hand_case_and_limits() {
        let q = linear_critic(&[1.0, 0.0], 0.0);
        let e = CriticEnsemble::from_parts(vec![q.clone(), q.clone()], vec![q.clone(), q]).unwrap();
        let p = policy(9);
        let b = batch(2, 10);
        let out = awr_policy_loss(&e, &p, &b, 0.4, 3).unwrap();
        let draw = p.sample(&b.states, derive_seed(3, &[TAG_POLICY])).unwrap();
        let lp = p.log_prob(&b.states, &b.actions).unwrap();
        let manual: f64 = (0..2)
            .map(|i| {
                let adv = b.actions.get(i, 0) - draw.actions.get(i, 0);
                -(adv / 0.4).exp().min(100.0) * lp[i] / 2.0
            })
            .sum();
        assert!((out.loss - manual).abs() <= 1e-12);

        // equal advantages: loss is negative mean log-likelihood
        let flat = awr_policy_loss(&constant_ensemble(0.3), &p, &b, 0.4, 3).unwrap();
        assert!((flat.loss + (lp[0] + lp[1]) / 2.0).abs() < 1e-12);
        let hot = awr_policy_loss(&e, &p, &b, 1e12, 3).unwrap();
        assert!((hot.loss - flat.loss).abs() < 1e-9);

        let r = finite_diff_check(
            |x| {
                let pp = p.with_params(p.params.with_values(x.to_vec()).unwrap()).unwrap();
                let lp = pp.log_prob(&b.states, &b.actions).unwrap();
                (0..2)
                    .map(|i| {
                        let adv = b.actions.get(i, 0) - draw.actions.get(i, 0);
                        -(adv / 0.4).exp().min(100.0) * lp[i] / 2.0
                    })
                    .sum::<f64>()
            },
            &out.grad,
            p.params.values(),
            1e-6,
            None,
        );
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }
}
