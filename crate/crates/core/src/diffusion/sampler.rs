use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::EpsPredictor;
use crate::numkit::{rng_from_seed, standard_normal_vec, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Zero added noise; the sample is a deterministic function of x_K.
    #[default]
    Deterministic,
    /// Ancestral sampling with per-step variance β_k = 1 − ᾱ_k/ᾱ_{k−1}.
    Stochastic,
}

/// Runs the K-step reverse chain from x_K ~ N(0, I), conditioned on (s, w).
/// The clean-action estimate is clipped to `[low, high]` at every step.
pub fn ddpm_sample<P: EpsPredictor + ?Sized>(
    model: &P,
    s: &[f64],
    w: f64,
    low: &[f64],
    high: &[f64],
    kind: SamplerKind,
    seed: u64,
) -> Result<Vec<f64>> {
    let dim = model.action_dim();
    if low.len() != dim || high.len() != dim {
        return Err(Error::shape("action bounds must match the action dimension"));
    }
    let schedule = model.schedule();
    let mut rng = rng_from_seed(seed);
    let mut x = standard_normal_vec(&mut rng, dim);
    let state = Matrix::row_vector(s);
    let clip = |v: &mut [f64]| {
        for (j, x) in v.iter_mut().enumerate() {
            *x = x.clamp(low[j], high[j]);
        }
    };
    for k in (1..=schedule.steps()).rev() {
        let eps = model
            .predict_eps(&state, &Matrix::row_vector(&x), &[k], &[w])?
            .into_data();
        let ab = schedule.alpha_bar(k);
        let ab_prev = schedule.alpha_bar(k - 1);
        let mut x0: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(xi, ei)| (xi - (1.0 - ab).sqrt() * ei) / ab.sqrt())
            .collect();
        clip(&mut x0);
        if k == 1 {
            x = x0;
            break;
        }
        x = match kind {
            SamplerKind::Deterministic => {
                // re-derive ε from the clipped x0 so the step stays consistent
                let eps_hat: Vec<f64> = x
                    .iter()
                    .zip(&x0)
                    .map(|(xi, x0i)| (xi - ab.sqrt() * x0i) / (1.0 - ab).sqrt())
                    .collect();
                x0.iter()
                    .zip(&eps_hat)
                    .map(|(x0i, ei)| ab_prev.sqrt() * x0i + (1.0 - ab_prev).sqrt() * ei)
                    .collect()
            }
            SamplerKind::Stochastic => {
                let alpha = ab / ab_prev;
                let c0 = ab_prev.sqrt() * (1.0 - alpha) / (1.0 - ab);
                let ck = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let sigma = (1.0 - alpha).sqrt();
                x0.iter()
                    .zip(&x)
                    .map(|(x0i, xi)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c0 * x0i + ck * xi + sigma * z
                    })
                    .collect()
            }
        };
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("diffusion sample"));
    }
    clip(&mut x);
    Ok(x)
}
