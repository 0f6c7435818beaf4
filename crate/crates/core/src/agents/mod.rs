//! Actor, critics and every training loss: SAC, the score-matching critic
//! regularizer, CQL/CalQL, IQL, TD3, TD3+BC and AWR.
//!
//! Losses are pure functions of (parameters, batch, seed) and return the
//! loss value with exact gradients.

mod baselines;
mod critic;
mod identity;
mod policy;
mod sac;

pub use baselines::{
    awr_policy_loss, calql_penalty, cql_penalty, iql_losses, td3_losses, td3bc_policy_loss,
    IqlOutput, Td3Output, MAX_ADVANTAGE_WEIGHT, TD3_NOISE_CLIP, TD3_NOISE_STD,
};
pub use critic::{
    q_values, q_values_and_action_grads, ActionValue, Aggregate, AlphaNet, CriticEnsemble,
    EnsembleView, StateScalar, ValueNet,
};
pub use identity::{verify_maxent_identity, IdentityGrid};
pub use policy::{GaussianPolicy, PolicySample, LOG_STD_MAX, LOG_STD_MIN};
pub use sac::{
    entropy_coef_grad, sac_critic_loss, sac_policy_loss, sample_b, score_match_loss,
    score_match_loss_with_eps, smac_critic_loss, CriticOutput, LossParams, PolicyOutput,
    ScoreMatchOutput, SmacOutput,
};
