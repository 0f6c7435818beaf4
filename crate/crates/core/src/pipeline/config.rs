use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::LossParams;
use crate::diffusion::{ScoreModelConfig, TrainConfig};
use crate::envs::EnvSpec;
use crate::numkit::Activation;
use crate::optim::OptimizerKind;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OfflineAlg {
    Smac,
    Sac,
    Cql,
    Calql,
    Iql,
    Td3bc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnlineAlg {
    Sac,
    Td3,
    Td3bc,
    Awr,
}

impl OfflineAlg {
    pub const ALL: [OfflineAlg; 6] = [
        OfflineAlg::Smac,
        OfflineAlg::Sac,
        OfflineAlg::Cql,
        OfflineAlg::Calql,
        OfflineAlg::Iql,
        OfflineAlg::Td3bc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OfflineAlg::Smac => "smac",
            OfflineAlg::Sac => "sac",
            OfflineAlg::Cql => "cql",
            OfflineAlg::Calql => "calql",
            OfflineAlg::Iql => "iql",
            OfflineAlg::Td3bc => "td3bc",
        }
    }
}

impl OnlineAlg {
    pub const ALL: [OnlineAlg; 4] = [OnlineAlg::Sac, OnlineAlg::Td3, OnlineAlg::Td3bc, OnlineAlg::Awr];

    pub fn name(self) -> &'static str {
        match self {
            OnlineAlg::Sac => "sac",
            OnlineAlg::Td3 => "td3",
            OnlineAlg::Td3bc => "td3bc",
            OnlineAlg::Awr => "awr",
        }
    }
}

impl fmt::Display for OfflineAlg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for OnlineAlg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OfflineAlg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OfflineAlg::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown offline algorithm {s:?}")))
    }
}

impl FromStr for OnlineAlg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OnlineAlg::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown online algorithm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub actor_hidden: Vec<usize>,
    pub actor_activation: Activation,
    pub critic_hidden: Vec<usize>,
    pub critic_activation: Activation,
    pub alpha_hidden: Vec<usize>,
    pub alpha_activation: Activation,
    pub value_hidden: Vec<usize>,
    pub ensemble_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            actor_hidden: vec![256, 256],
            actor_activation: Activation::Relu,
            critic_hidden: vec![256, 256],
            critic_activation: Activation::Tanh,
            alpha_hidden: vec![256, 256],
            alpha_activation: Activation::Relu,
            value_hidden: vec![256, 256],
            ensemble_size: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    pub value: f64,
    /// Adam rate on the log entropy coefficient.
    pub entropy: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            critic: 3e-4,
            actor: 1e-4,
            alpha: 1e-4,
            value: 3e-4,
            entropy: 3e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub trajectories: usize,
    /// Gaussian noise on the scripted expert; `None` uses the environment default.
    pub behavior_noise: Option<f64>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            trajectories: 100,
            behavior_noise: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub model: ScoreModelConfig,
    pub train: TrainConfig,
}

/// One experiment: environment, algorithms, budgets, seeds and every
/// hyper-parameter. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    pub offline_alg: OfflineAlg,
    pub online_alg: OnlineAlg,
    pub optimizer: OptimizerKind,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub offline_batch: usize,
    pub online_batch: usize,
    pub warm_start_count: usize,
    /// Fraction of each online batch drawn from the offline dataset.
    pub mix: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub loss: LossParams,
    /// Condition the score model on trajectory outcomes; otherwise every w is 1.
    pub rvs_enabled: bool,
    /// Adapt the entropy coefficient toward `loss.target_entropy`.
    pub tune_entropy: bool,
    /// Polyak coefficient λ for target critics.
    pub polyak: f64,
    /// Std of TD3-style exploration noise, in units of the action half-range.
    pub exploration_noise: f64,
    pub networks: NetworkConfig,
    pub learning_rates: LearningRates,
    pub dataset: DatasetConfig,
    pub diffusion: DiffusionSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "reach2d".into(),
            offline_alg: OfflineAlg::Smac,
            online_alg: OnlineAlg::Sac,
            optimizer: OptimizerKind::Muon,
            offline_steps: 20_000,
            online_steps: 10_000,
            offline_batch: 64,
            online_batch: 1024,
            warm_start_count: 5000,
            mix: 0.5,
            eval_every: 250,
            eval_episodes: 10,
            seeds: vec![0, 1, 2, 3],
            loss: LossParams::default(),
            rvs_enabled: true,
            tune_entropy: true,
            polyak: 0.005,
            exploration_noise: 0.1,
            networks: NetworkConfig::default(),
            learning_rates: LearningRates::default(),
            dataset: DatasetConfig::default(),
            diffusion: DiffusionSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `base` (or the defaults when `None`), applies dotted-path
    /// overrides in order, then validates.
    pub fn with_overrides(base: Option<&str>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
        let mut value = match base {
            Some(text) => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            None => serde_json::to_value(ExperimentConfig::default())?,
        };
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::builtin(&self.env).map_err(|e| Error::Config(e.to_string()))
    }

    /// Target entropy, defaulting to −10·|A|.
    pub fn target_entropy(&self, action_dim: usize) -> f64 {
        self.loss.target_entropy.unwrap_or(-10.0 * action_dim as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.env_spec()?;
        self.loss.validate()?;
        if self.offline_batch < 2 || self.online_batch < 2 {
            return bad("batch sizes must be at least 2");
        }
        if !self.offline_batch.is_multiple_of(2) || !self.online_batch.is_multiple_of(2) {
            return bad("batch sizes must be even (B(s) splits them in half)");
        }
        if self.warm_start_count == 0 {
            return bad("warm_start_count must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return bad("mix must lie in [0, 1]");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad("polyak must lie in (0, 1]");
        }
        if !(self.exploration_noise >= 0.0 && self.exploration_noise.is_finite()) {
            return bad("exploration_noise must be finite and nonnegative");
        }
        if self.networks.ensemble_size < 2 {
            return bad("ensemble_size must be at least 2");
        }
        let lr = &self.learning_rates;
        if [lr.critic, lr.actor, lr.alpha, lr.value, lr.entropy].iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("learning rates must be positive");
        }
        if self.dataset.trajectories == 0 {
            return bad("dataset.trajectories must be positive");
        }
        if self.dataset.behavior_noise.is_some_and(|n| !(n >= 0.0 && n.is_finite())) {
            return bad("dataset.behavior_noise must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Sets `key` (dotted path) in a JSON document. The value is parsed as JSON
/// when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.target_entropy(2), -20.0);
    }

    #[test]
    fn overrides_use_dotted_paths_and_last_wins() {
        let ov = vec![
            ("offline_alg".to_string(), "cql".to_string()),
            ("loss.kappa".to_string(), "0".to_string()),
            ("offline_alg".to_string(), "iql".to_string()),
            ("networks.critic_hidden".to_string(), "[8,8]".to_string()),
        ];
        let cfg = ExperimentConfig::with_overrides(None, &ov).unwrap();
        assert_eq!(cfg.offline_alg, OfflineAlg::Iql);
        assert_eq!(cfg.loss.kappa, 0.0);
        assert_eq!(cfg.networks.critic_hidden, vec![8, 8]);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"mix": 1.5}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"env": "moon"}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"loss": {"expectile": 0}}"#), Err(Error::Config(_))));
        let ov = vec![("online_alg".to_string(), "ppo".to_string())];
        assert!(ExperimentConfig::with_overrides(None, &ov).is_err());
        assert!("td3bc".parse::<OfflineAlg>().is_ok());
        assert!("ppo".parse::<OnlineAlg>().is_err());
    }
}
