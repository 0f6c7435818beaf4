//! Outcome-conditioned denoising diffusion over actions: noise schedule,
//! ε-prediction network, training loss, reverse sampler and the k = 1 score
//! query.

mod checkpoint;
mod model;
mod sampler;
mod schedule;

pub use checkpoint::{load_score_model, save_score_model, CHECKPOINT_MAGIC};
pub use model::{
    calibrated_score, diffusion_loss, diffusion_loss_with, score_at_k1, score_at_k1_batch,
    timestep_embedding, train_score_model, EpsPredictor, ScoreModel, ScoreModelConfig,
    TrainConfig,
};
pub use sampler::{ddpm_sample, SamplerKind};
pub use schedule::{cosine_schedule, noise_action, NoiseSchedule, COSINE_OFFSET};
