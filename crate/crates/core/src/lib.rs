//! Offline-to-online reinforcement-learning laboratory.
//!
//! The crate is organised bottom-up:
//!
//! * [`numkit`]: dense matrices, small MLPs with reverse-mode (and
//!   tangent-then-reverse) differentiation, finite-difference checking.
//! * [`optim`]: Adam, Muon (Newton–Schulz orthogonalised momentum) and Polyak
//!   averaging.
//! * [`envs`]: built-in continuous-control tasks, offline datasets with
//!   outcome labels, the replay buffer and mixed batch sampling.
//! * [`diffusion`]: an outcome-conditioned denoising diffusion model over
//!   actions whose least-noised output is used as a score estimate.
//! * [`agents`]: policies, critic ensembles and every loss (SAC, score
//!   matching, CQL/CalQL, IQL, TD3, TD3+BC, AWR).
//! * [`pipeline`]: offline pre-training, warm start, online fine-tuning,
//!   evaluation, checkpoints and regret records.
//! * [`analysis`]: parameter-space landscapes and normalised regret tables.

// Index loops mirror the math, and `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod analysis;
pub mod diffusion;
pub mod envs;
mod error;
pub mod numkit;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};
