//! Experiment driver: offline pre-training, warm start, online fine-tuning,
//! greedy evaluation, agent checkpoints, metric streams and regret records.
//!
//! Every random draw is derived from the run seed and the step counters, so
//! a run is fixed bit-for-bit by its configuration and seed.

mod agent;
mod config;
mod eval;
mod metrics;
mod regret;
mod train;

pub use agent::{
    load_checkpoint, save_checkpoint, AgentCheckpoint, AgentState, OptimizerStates, StepStats, AGENT_MAGIC,
    AGENT_VERSION,
};
pub use config::{
    apply_override, DatasetConfig, DiffusionSettings, ExperimentConfig, LearningRates, NetworkConfig, OfflineAlg,
    OnlineAlg,
};
pub use eval::{
    evaluate_actor, evaluate_policy, mean_stderr, normalized_score, reference_returns, EvalResult, GreedyPolicy,
    SampledPolicy,
};
pub use metrics::{MetricRow, MetricsLog, Phase, METRICS_HEADER};
pub use regret::{regret, regret_records, RegretRecord, RunSummary, StableTransfer};
pub use train::{
    build_dataset, eval_seed, offline_batch, offline_pretrain, offline_resume, online_finetune, run_id, train_diffusion,
    warm_start, RunOutput,
};
