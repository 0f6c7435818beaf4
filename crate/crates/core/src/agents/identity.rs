use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Uniform grid of `n` points on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl IdentityGrid {
    pub fn points(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n).map(|i| self.lo + i as f64 * h).collect()
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }
}

/// Builds π*(a) = exp(Q(a)/α)/Z by trapezoidal quadrature on the grid and
/// returns sup over interior points of |∂_a log π* − (1/α)∂_a Q|, both
/// derivatives by central differences on the grid.
pub fn verify_maxent_identity<F: Fn(f64) -> f64>(q: F, alpha: f64, grid: IdentityGrid) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive and finite, got {alpha}")));
    }
    if grid.n < 3 || !(grid.lo < grid.hi) || !grid.lo.is_finite() || !grid.hi.is_finite() {
        return Err(Error::invalid("grid needs at least three points on a finite interval"));
    }
    let pts = grid.points();
    let h = grid.spacing();
    let qv: Vec<f64> = pts.iter().map(|&a| q(a)).collect();
    if qv.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("Q on the grid"));
    }
    let logits: Vec<f64> = qv.iter().map(|v| v / alpha).collect();
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass: f64 = logits
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let wt = if i == 0 || i + 1 == logits.len() { 0.5 } else { 1.0 };
            wt * h * (l - peak).exp()
        })
        .sum();
    let log_z = peak + mass.ln();
    if !log_z.is_finite() {
        return Err(Error::invalid("normalizer of exp(Q/α) diverges on the grid"));
    }
    let log_pi: Vec<f64> = logits.iter().map(|l| l - log_z).collect();
    let mut gap: f64 = 0.0;
    for i in 1..pts.len() - 1 {
        let score = (log_pi[i + 1] - log_pi[i - 1]) / (2.0 * h);
        let dq = (qv[i + 1] - qv[i - 1]) / (2.0 * h);
        gap = gap.max((score - dq / alpha).abs());
    }
    Ok(gap)
}
