use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OfflineAlg, OnlineAlg};
use crate::agents::{
    awr_policy_loss, calql_penalty, cql_penalty, entropy_coef_grad, iql_losses, sac_critic_loss, sac_policy_loss,
    smac_critic_loss, td3_losses, td3bc_policy_loss, Aggregate, AlphaNet, CriticEnsemble, GaussianPolicy, SmacOutput,
    ValueNet,
};
use crate::diffusion::ScoreModel;
use crate::envs::{Batch, EnvSpec};
use crate::numkit::derive_seed;
use crate::optim::{adam_step_slice, optimizer_step, OptState, OptimizerKind};
use crate::{Error, Result};

pub const AGENT_MAGIC: &[u8; 8] = b"O2OAGENT";
pub const AGENT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerStates {
    pub actor: OptState,
    pub critics: Vec<OptState>,
    pub alpha: OptState,
    pub value: Option<OptState>,
    /// One-coordinate Adam state on log α.
    pub entropy: OptState,
}

impl OptimizerStates {
    fn new(
        kind: OptimizerKind,
        cfg: &ExperimentConfig,
        policy: &GaussianPolicy,
        critics: &CriticEnsemble,
        alpha: &AlphaNet,
        value: Option<&ValueNet>,
    ) -> OptimizerStates {
        let lr = &cfg.learning_rates;
        OptimizerStates {
            actor: OptState::new(kind, policy.params.len(), lr.actor),
            critics: critics.members.iter().map(|m| OptState::new(kind, m.len(), lr.critic)).collect(),
            alpha: OptState::new(kind, alpha.params.len(), lr.alpha),
            value: value.map(|v| OptState::new(kind, v.params.len(), lr.value)),
            entropy: OptState::adam(1, lr.entropy),
        }
    }
}

/// Everything training mutates. Randomness is a pure function of `seed` and
/// the step counters, so this is also the full resume state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub seed: u64,
    pub offline_step: u64,
    pub online_step: u64,
    pub policy: GaussianPolicy,
    pub critics: CriticEnsemble,
    pub alpha_net: AlphaNet,
    pub value_net: Option<ValueNet>,
    pub entropy_coef: f64,
    pub optimizers: OptimizerStates,
}

/// Saved form of [`AgentState`].
pub type AgentCheckpoint = AgentState;

/// Scalar diagnostics of one gradient step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub score_match_loss: Option<f64>,
    pub penalty: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy_coef: f64,
}

impl StepStats {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("critic_loss", self.critic_loss), ("policy_loss", self.policy_loss)];
        if let Some(v) = self.score_match_loss {
            out.push(("score_match_loss", v));
        }
        if let Some(v) = self.penalty {
            out.push(("conservative_penalty", v));
        }
        if let Some(v) = self.value_loss {
            out.push(("value_loss", v));
        }
        out.push(("entropy_coef", self.entropy_coef));
        out
    }
}

/// Per-step seed tags.
pub(crate) const PHASE_INIT: u64 = 0;
pub(crate) const PHASE_OFFLINE: u64 = 1;
pub(crate) const PHASE_ONLINE: u64 = 2;
pub(crate) const PHASE_WARM: u64 = 3;
pub(crate) const PHASE_EVAL: u64 = 4;

fn numeric(step: u64, loss: &'static str) -> impl Fn(Error) -> Error {
    move |e| {
        if e.is_numeric() {
            Error::NumericAbort {
                step,
                loss: format!("{loss}: {e}"),
            }
        } else {
            e
        }
    }
}

fn add_scaled(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

impl AgentState {
    pub fn init(cfg: &ExperimentConfig, env: &EnvSpec, seed: u64) -> Result<AgentState> {
        let net = &cfg.networks;
        let policy = GaussianPolicy::new(
            env.state_dim,
            &net.actor_hidden,
            net.actor_activation,
            env.action_low.clone(),
            env.action_high.clone(),
            true,
            derive_seed(seed, &[PHASE_INIT, 0]),
        )?;
        let critics = CriticEnsemble::new(
            env.state_dim,
            env.action_dim,
            &net.critic_hidden,
            net.critic_activation,
            net.ensemble_size,
            derive_seed(seed, &[PHASE_INIT, 1]),
        )?;
        let alpha_net = AlphaNet::new(
            env.state_dim,
            &net.alpha_hidden,
            net.alpha_activation,
            derive_seed(seed, &[PHASE_INIT, 2]),
        )?;
        let value_net = match cfg.offline_alg {
            OfflineAlg::Iql => Some(ValueNet::new(
                env.state_dim,
                &net.value_hidden,
                net.critic_activation,
                derive_seed(seed, &[PHASE_INIT, 3]),
            )?),
            _ => None,
        };
        let optimizers = OptimizerStates::new(cfg.optimizer, cfg, &policy, &critics, &alpha_net, value_net.as_ref());
        Ok(AgentState {
            seed,
            offline_step: 0,
            online_step: 0,
            policy,
            critics,
            alpha_net,
            value_net,
            entropy_coef: cfg.loss.entropy_coef,
            optimizers,
        })
    }

    /// Fresh optimizer states of `kind` for every network, as used when
    /// fine-tuning starts.
    pub fn reset_optimizers(&mut self, cfg: &ExperimentConfig, kind: OptimizerKind) {
        self.optimizers = OptimizerStates::new(
            kind,
            cfg,
            &self.policy,
            &self.critics,
            &self.alpha_net,
            self.value_net.as_ref(),
        );
    }

    fn step_critics(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        for ((m, opt), g) in self.critics.members.iter_mut().zip(&mut self.optimizers.critics).zip(grads) {
            let (p, o) = optimizer_step(opt, m, g)?;
            *m = p;
            *opt = o;
        }
        Ok(())
    }

    fn step_policy(&mut self, grad: &[f64]) -> Result<()> {
        let (p, o) = optimizer_step(&self.optimizers.actor, &self.policy.params, grad)?;
        self.policy.params = p;
        self.optimizers.actor = o;
        Ok(())
    }

    fn step_alpha(&mut self, grad: &[f64]) -> Result<()> {
        let (p, o) = optimizer_step(&self.optimizers.alpha, &self.alpha_net.params, grad)?;
        self.alpha_net.params = p;
        self.optimizers.alpha = o;
        Ok(())
    }

    fn step_value(&mut self, grad: &[f64]) -> Result<()> {
        let (value, opt) = match (self.value_net.as_mut(), self.optimizers.value.as_mut()) {
            (Some(v), Some(o)) => (v, o),
            _ => return Err(Error::invalid("IQL needs a value network")),
        };
        let (p, o) = optimizer_step(opt, &value.params, grad)?;
        value.params = p;
        *opt = o;
        Ok(())
    }

    fn tune_entropy(&mut self, cfg: &ExperimentConfig, mean_log_prob: f64) -> Result<()> {
        if !cfg.tune_entropy || self.entropy_coef <= 0.0 {
            return Ok(());
        }
        let g = entropy_coef_grad(mean_log_prob, cfg.target_entropy(self.policy.action_dim()));
        let (v, o) = adam_step_slice(&self.optimizers.entropy, &[self.entropy_coef.ln()], &[g])?;
        self.entropy_coef = v[0].exp();
        self.optimizers.entropy = o;
        Ok(())
    }

    /// One offline step in the order critic, α_ψ, policy, targets.
    pub fn offline_update(
        &mut self,
        cfg: &ExperimentConfig,
        batch: &Batch,
        score_model: Option<&ScoreModel>,
    ) -> Result<StepStats> {
        let step = self.offline_step;
        let seed = derive_seed(self.seed, &[PHASE_OFFLINE, step, 1]);
        let lp = &cfg.loss;
        let alpha = self.entropy_coef;
        let mut stats = StepStats::default();
        match cfg.offline_alg {
            OfflineAlg::Smac | OfflineAlg::Sac => {
                let out = if cfg.offline_alg == OfflineAlg::Smac {
                    let model = score_model.ok_or_else(|| Error::Config("SMAC needs a trained score model".into()))?;
                    smac_critic_loss(&self.critics, &self.alpha_net, &self.policy, model, batch, alpha, lp.gamma, lp.kappa, seed)
                        .map_err(numeric(step, "SMAC critic loss"))?
                } else {
                    let ac = sac_critic_loss(&self.critics, &self.policy, batch, alpha, lp.gamma, seed)
                        .map_err(numeric(step, "SAC critic loss"))?;
                    SmacOutput {
                        loss: ac.loss,
                        critic_grads: ac.grads.clone(),
                        alpha_grad: Vec::new(),
                        actor_critic: ac,
                        score_match: None,
                    }
                };
                stats.critic_loss = out.loss;
                stats.score_match_loss = out.score_match.as_ref().map(|s| s.loss);
                self.step_critics(&out.critic_grads).map_err(numeric(step, "critic update"))?;
                if !out.alpha_grad.is_empty() {
                    self.step_alpha(&out.alpha_grad).map_err(numeric(step, "alpha update"))?;
                }
                stats.policy_loss = self.sac_actor_step(cfg, batch, seed, step)?;
            }
            OfflineAlg::Cql | OfflineAlg::Calql => {
                let ac = sac_critic_loss(&self.critics, &self.policy, batch, alpha, lp.gamma, seed)
                    .map_err(numeric(step, "critic loss"))?;
                let pen = if cfg.offline_alg == OfflineAlg::Calql && batch.mc_returns.is_some() {
                    calql_penalty(&self.critics, &self.policy, batch, seed)
                } else {
                    cql_penalty(&self.critics, &self.policy, batch, seed)
                }
                .map_err(numeric(step, "conservative penalty"))?;
                let grads: Vec<Vec<f64>> =
                    ac.grads.iter().zip(&pen.grads).map(|(a, p)| add_scaled(a, p, lp.cql_alpha)).collect();
                stats.critic_loss = ac.loss + lp.cql_alpha * pen.loss;
                stats.penalty = Some(pen.loss);
                self.step_critics(&grads).map_err(numeric(step, "critic update"))?;
                stats.policy_loss = self.sac_actor_step(cfg, batch, seed, step)?;
            }
            OfflineAlg::Iql => {
                let value = self
                    .value_net
                    .as_ref()
                    .ok_or_else(|| Error::invalid("IQL state has no value network"))?;
                let out = iql_losses(&self.critics, value, &self.policy, batch, lp).map_err(numeric(step, "IQL losses"))?;
                stats.critic_loss = out.critic.loss;
                stats.value_loss = Some(out.value_loss);
                stats.policy_loss = out.policy.loss;
                self.step_critics(&out.critic.grads).map_err(numeric(step, "critic update"))?;
                self.step_value(&out.value_grad).map_err(numeric(step, "value update"))?;
                self.step_policy(&out.policy.grad).map_err(numeric(step, "policy update"))?;
            }
            OfflineAlg::Td3bc => {
                let out = td3_losses(&self.critics, &self.policy, batch, lp.gamma, true, seed)
                    .map_err(numeric(step, "TD3 critic loss"))?;
                stats.critic_loss = out.critic.loss;
                self.step_critics(&out.critic.grads).map_err(numeric(step, "critic update"))?;
                let pol = td3bc_policy_loss(&self.critics.online(Aggregate::Min), &self.policy, batch, lp.bc_weight)
                    .map_err(numeric(step, "TD3+BC policy loss"))?;
                stats.policy_loss = pol.loss;
                self.step_policy(&pol.grad).map_err(numeric(step, "policy update"))?;
            }
        }
        self.critics.polyak(cfg.polyak)?;
        stats.entropy_coef = self.entropy_coef;
        self.offline_step += 1;
        Ok(stats)
    }

    fn sac_actor_step(&mut self, cfg: &ExperimentConfig, batch: &Batch, seed: u64, step: u64) -> Result<f64> {
        let pol = sac_policy_loss(
            &self.policy,
            &self.critics.online(Aggregate::Min),
            &batch.states,
            self.entropy_coef,
            seed,
        )
        .map_err(numeric(step, "policy loss"))?;
        self.step_policy(&pol.grad).map_err(numeric(step, "policy update"))?;
        self.tune_entropy(cfg, pol.mean_log_prob).map_err(numeric(step, "entropy update"))?;
        Ok(pol.loss)
    }

    /// One online gradient step of `cfg.online_alg`.
    pub fn online_update(&mut self, cfg: &ExperimentConfig, batch: &Batch) -> Result<StepStats> {
        let step = self.online_step;
        let seed = derive_seed(self.seed, &[PHASE_ONLINE, step, 1]);
        let lp = &cfg.loss;
        let mut stats = StepStats::default();
        match cfg.online_alg {
            OnlineAlg::Sac => {
                let ac = sac_critic_loss(&self.critics, &self.policy, batch, self.entropy_coef, lp.gamma, seed)
                    .map_err(numeric(step, "SAC critic loss"))?;
                stats.critic_loss = ac.loss;
                self.step_critics(&ac.grads).map_err(numeric(step, "critic update"))?;
                stats.policy_loss = self.sac_actor_step(cfg, batch, seed, step)?;
            }
            OnlineAlg::Td3 | OnlineAlg::Td3bc => {
                let out = td3_losses(&self.critics, &self.policy, batch, lp.gamma, true, seed)
                    .map_err(numeric(step, "TD3 critic loss"))?;
                stats.critic_loss = out.critic.loss;
                self.step_critics(&out.critic.grads).map_err(numeric(step, "critic update"))?;
                let pol = if cfg.online_alg == OnlineAlg::Td3 {
                    out.policy
                } else {
                    td3bc_policy_loss(&self.critics.online(Aggregate::Min), &self.policy, batch, lp.bc_weight)
                        .map_err(numeric(step, "TD3+BC policy loss"))?
                };
                stats.policy_loss = pol.loss;
                self.step_policy(&pol.grad).map_err(numeric(step, "policy update"))?;
            }
            OnlineAlg::Awr => {
                let ac = sac_critic_loss(&self.critics, &self.policy, batch, 0.0, lp.gamma, seed)
                    .map_err(numeric(step, "critic loss"))?;
                stats.critic_loss = ac.loss;
                self.step_critics(&ac.grads).map_err(numeric(step, "critic update"))?;
                let pol = awr_policy_loss(&self.critics, &self.policy, batch, lp.awr_temperature, seed)
                    .map_err(numeric(step, "AWR policy loss"))?;
                stats.policy_loss = pol.loss;
                self.step_policy(&pol.grad).map_err(numeric(step, "policy update"))?;
            }
        }
        self.critics.polyak(cfg.polyak)?;
        stats.entropy_coef = self.entropy_coef;
        self.online_step += 1;
        Ok(stats)
    }
}

/// Layout: magic, u32 version (little-endian), JSON body.
pub fn save_checkpoint(state: &AgentCheckpoint, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(AGENT_MAGIC);
    out.extend_from_slice(&AGENT_VERSION.to_le_bytes());
    serde_json::to_writer(&mut out, state)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AgentCheckpoint> {
    let bytes = fs::read(path)?;
    let fail = |message: String| Error::Format {
        path: path.into(),
        message,
    };
    if bytes.len() < 12 {
        return Err(fail(format!("file has {} bytes, shorter than the 12-byte header", bytes.len())));
    }
    if &bytes[..8] != AGENT_MAGIC {
        return Err(fail("bad magic bytes; not an agent checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != AGENT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: AGENT_VERSION,
        });
    }
    let state: AgentState = serde_json::from_slice(&bytes[12..]).map_err(|e| fail(format!("body: {e}")))?;
    CriticEnsemble::from_parts(state.critics.members.clone(), state.critics.targets.clone())?;
    GaussianPolicy::from_params(
        state.policy.params.clone(),
        state.policy.low.clone(),
        state.policy.high.clone(),
        state.policy.squash,
    )?;
    Ok(state)
}
