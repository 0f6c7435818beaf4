//! Dense numeric core: matrices, MLPs with exact reverse-mode gradients,
//! parameter flattening, finite-difference checking and seeded randomness.

mod fd;
mod matrix;
mod mlp;
mod rng;

pub use fd::{finite_diff_check, finite_diff_gradient, relative_error, FdReport, FD_DENOM_FLOOR};
pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use mlp::{
    backward, backward_dual, forward_batch, forward_cached, forward_tangent, mlp_forward,
    mlp_grad, Activation, DualCache, ForwardCache, LayerBlock, MlpSpec, OutputTransform,
    ParamVector, EXP_CLAMP_HIGH, EXP_CLAMP_LOW,
};
pub use rng::{derive_seed, rng_from_seed, standard_normal_vec, SeedRng};
