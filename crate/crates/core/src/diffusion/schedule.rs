use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const COSINE_OFFSET: f64 = 0.008;
const ALPHA_BAR_MIN: f64 = 1e-5;
const ALPHA_BAR_MAX: f64 = 0.9999;

/// Cumulative signal fractions ᾱ_1..ᾱ_K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<NoiseSchedule> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::invalid("ᾱ values must lie in (0, 1)"));
        }
        if alpha_bar.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::invalid("ᾱ must be strictly decreasing"));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Number of diffusion steps K.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// ᾱ_k for 1 ≤ k ≤ K; ᾱ_0 = 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// ᾱ_k = f(k)/f(0), f(k) = cos²(((k/K)+s)/(1+s)·π/2), clipped to [1e-5, 0.9999].
/// Monotone clipping can create ties at the ends for very large K; those are
/// rejected.
pub fn cosine_schedule(k_steps: usize) -> Result<NoiseSchedule> {
    if k_steps < 2 {
        return Err(Error::invalid("cosine schedule needs K ≥ 2"));
    }
    let f = |k: f64| {
        let x = ((k / k_steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let alpha_bar = (1..=k_steps)
        .map(|k| (f(k as f64) / f0).clamp(ALPHA_BAR_MIN, ALPHA_BAR_MAX))
        .collect();
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// Closed-form forward noising from the clean action:
/// √ᾱ_k·a0 + √(1−ᾱ_k)·ε.
pub fn noise_action(a0: &[f64], k: usize, schedule: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    if k == 0 || k > schedule.steps() {
        return Err(Error::invalid(format!(
            "diffusion step {k} outside 1..={}",
            schedule.steps()
        )));
    }
    if a0.len() != eps.len() {
        return Err(Error::shape("noise must match the action dimension"));
    }
    let ab = schedule.alpha_bar(k);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| sa * a + sn * e).collect())
}
