use serde::{Deserialize, Serialize};

use crate::numkit::{
    backward, forward_batch, forward_cached, rng_from_seed, standard_normal_vec, Activation,
    ForwardCache, Matrix, MlpSpec, OutputTransform, ParamVector, EXP_CLAMP_HIGH, EXP_CLAMP_LOW,
};
use crate::{Error, Result};

/// Range of the log standard deviation; the gradient is zero outside it.
pub const LOG_STD_MIN: f64 = EXP_CLAMP_LOW;
pub const LOG_STD_MAX: f64 = EXP_CLAMP_HIGH;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const ATANH_EDGE: f64 = 1.0 - 1e-6;

/// Diagonal Gaussian policy. The network maps a state to `[μ, log σ]`;
/// with `squash` the sample is `c + h·tanh(u)` for box center `c` and
/// half-width `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub params: ParamVector,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub squash: bool,
}

/// Reparameterized draw with everything the reverse pass needs.
#[derive(Clone, Debug)]
pub struct PolicySample {
    pub actions: Matrix,
    pub log_probs: Vec<f64>,
    noise: Matrix,
    pre_squash: Matrix,
    raw: Matrix,
    cache: ForwardCache,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ln(1 − tanh²u), stable for large |u|.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn clamp_log_std(rho: f64) -> (f64, f64) {
    if rho < LOG_STD_MIN {
        (LOG_STD_MIN, 0.0)
    } else if rho > LOG_STD_MAX {
        (LOG_STD_MAX, 0.0)
    } else {
        (rho, 1.0)
    }
}

impl GaussianPolicy {
    pub fn new(
        state_dim: usize,
        hidden: &[usize],
        activation: Activation,
        low: Vec<f64>,
        high: Vec<f64>,
        squash: bool,
        seed: u64,
    ) -> Result<GaussianPolicy> {
        let spec = MlpSpec::with_hidden(state_dim, hidden, 2 * low.len(), activation, OutputTransform::Identity)?;
        let params = spec.init(&mut rng_from_seed(seed));
        GaussianPolicy::from_params(params, low, high, squash)
    }

    pub fn from_params(params: ParamVector, low: Vec<f64>, high: Vec<f64>, squash: bool) -> Result<GaussianPolicy> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::shape("action bounds must be nonempty and equal length"));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return Err(Error::invalid("action bounds must be finite with low < high"));
        }
        if params.spec().output_dim() != 2 * low.len() {
            return Err(Error::shape("policy network must output mean and log-std per action"));
        }
        Ok(GaussianPolicy {
            params,
            low,
            high,
            squash,
        })
    }

    pub fn with_params(&self, params: ParamVector) -> Result<GaussianPolicy> {
        GaussianPolicy::from_params(params, self.low.clone(), self.high.clone(), self.squash)
    }

    pub fn action_dim(&self) -> usize {
        self.low.len()
    }

    pub fn state_dim(&self) -> usize {
        self.params.spec().input_dim()
    }

    fn center(&self, j: usize) -> f64 {
        0.5 * (self.low[j] + self.high[j])
    }

    fn half(&self, j: usize) -> f64 {
        0.5 * (self.high[j] - self.low[j])
    }

    /// Reparameterized samples `a = f(μ + σξ)` with ξ drawn from `seed`, and
    /// log π(a|s) including the change-of-variables term.
    pub fn sample(&self, states: &Matrix, seed: u64) -> Result<PolicySample> {
        let (raw, cache) = forward_cached(&self.params, states)?;
        let (n, dim) = (states.rows(), self.action_dim());
        let noise = Matrix::from_vec(n, dim, standard_normal_vec(&mut rng_from_seed(seed), n * dim))?;
        let mut pre = Matrix::zeros(n, dim);
        let mut actions = Matrix::zeros(n, dim);
        let mut log_probs = vec![0.0; n];
        for i in 0..n {
            let z = raw.row(i);
            let xi = noise.row(i);
            let mut lp = 0.0;
            for j in 0..dim {
                let (rho, _) = clamp_log_std(z[dim + j]);
                let u = z[j] + rho.exp() * xi[j];
                pre.set(i, j, u);
                lp += -0.5 * xi[j] * xi[j] - rho - HALF_LN_2PI;
                if self.squash {
                    actions.set(i, j, self.center(j) + self.half(j) * u.tanh());
                    lp -= self.half(j).ln() + log_one_minus_tanh_sq(u);
                } else {
                    actions.set(i, j, u);
                }
            }
            log_probs[i] = lp;
        }
        if !actions.is_finite() || log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("policy sample"));
        }
        Ok(PolicySample {
            actions,
            log_probs,
            noise,
            pre_squash: pre,
            raw,
            cache,
        })
    }

    /// Gradient in φ of `Σ_i ⟨ā_i, a_i⟩ + Σ_i l̄_i·log π(a_i|s_i)` through a
    /// reparameterized sample.
    pub fn sample_grad(&self, sample: &PolicySample, action_bar: &Matrix, logp_bar: &[f64]) -> Result<Vec<f64>> {
        let (n, dim) = (sample.actions.rows(), self.action_dim());
        if action_bar.rows() != n || action_bar.cols() != dim || logp_bar.len() != n {
            return Err(Error::shape("upstream gradients must match the sample"));
        }
        let mut zbar = Matrix::zeros(n, 2 * dim);
        for i in 0..n {
            for j in 0..dim {
                let u = sample.pre_squash.get(i, j);
                let abar = action_bar.get(i, j);
                let lbar = logp_bar[i];
                // ∂a/∂u and ∂log π/∂u (the latter from the tanh correction)
                let (da_du, dlp_du) = if self.squash {
                    let t = u.tanh();
                    (self.half(j) * (1.0 - t * t), 2.0 * t)
                } else {
                    (1.0, 0.0)
                };
                let ubar = abar * da_du + lbar * dlp_du;
                let (rho, live) = clamp_log_std(sample.raw.get(i, dim + j));
                let sigma = rho.exp();
                zbar.set(i, j, ubar);
                zbar.set(i, dim + j, live * (ubar * sigma * sample.noise.get(i, j) - lbar));
            }
        }
        let (g, _) = backward(&self.params, &sample.cache, &zbar)?;
        Ok(g)
    }

    /// Deterministic action `f(μ(s))`.
    pub fn mean_action(&self, states: &Matrix) -> Result<Matrix> {
        let raw = forward_batch(&self.params, states)?;
        Ok(self.squash_means(&raw))
    }

    fn squash_means(&self, raw: &Matrix) -> Matrix {
        let dim = self.action_dim();
        let mut out = Matrix::zeros(raw.rows(), dim);
        for i in 0..raw.rows() {
            for j in 0..dim {
                let m = raw.get(i, j);
                out.set(i, j, if self.squash { self.center(j) + self.half(j) * m.tanh() } else { m });
            }
        }
        out
    }

    /// Deterministic actions plus a closure-free gradient helper: returns the
    /// actions and the gradient in φ of `Σ ⟨ā, a⟩` for the given upstream.
    pub fn mean_action_grad(&self, states: &Matrix, action_bar: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let (raw, cache) = forward_cached(&self.params, states)?;
        let dim = self.action_dim();
        let n = states.rows();
        if action_bar.rows() != n || action_bar.cols() != dim {
            return Err(Error::shape("upstream must match the action batch"));
        }
        let mut zbar = Matrix::zeros(n, 2 * dim);
        for i in 0..n {
            for j in 0..dim {
                let d = if self.squash {
                    let t = raw.get(i, j).tanh();
                    self.half(j) * (1.0 - t * t)
                } else {
                    1.0
                };
                zbar.set(i, j, action_bar.get(i, j) * d);
            }
        }
        let (g, _) = backward(&self.params, &cache, &zbar)?;
        Ok((self.squash_means(&raw), g))
    }

    /// log π(a|s) for given actions. Squashed actions are pulled inside the
    /// open box by 1e-6 before inverting tanh.
    pub fn log_prob(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        Ok(self.log_prob_grad(states, actions, None)?.0)
    }

    /// log π(a|s) and the gradient in φ of `Σ_i weights_i·log π(a_i|s_i)`.
    pub fn log_prob_grad(
        &self,
        states: &Matrix,
        actions: &Matrix,
        weights: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let dim = self.action_dim();
        let n = states.rows();
        if actions.rows() != n || actions.cols() != dim {
            return Err(Error::shape("actions must have one row per state"));
        }
        let (raw, cache) = forward_cached(&self.params, states)?;
        let mut zbar = Matrix::zeros(n, 2 * dim);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let wi = weights.map_or(0.0, |w| w[i]);
            let mut lp = 0.0;
            for j in 0..dim {
                let (u, correction) = if self.squash {
                    let y = ((actions.get(i, j) - self.center(j)) / self.half(j)).clamp(-ATANH_EDGE, ATANH_EDGE);
                    (y.atanh(), self.half(j).ln() + (1.0 - y * y).ln())
                } else {
                    (actions.get(i, j), 0.0)
                };
                let mu = raw.get(i, j);
                let (rho, live) = clamp_log_std(raw.get(i, dim + j));
                let sigma = rho.exp();
                let xi = (u - mu) / sigma;
                lp += -0.5 * xi * xi - rho - HALF_LN_2PI - correction;
                zbar.set(i, j, wi * xi / sigma);
                zbar.set(i, dim + j, wi * live * (xi * xi - 1.0));
            }
            out[i] = lp;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("policy log-density"));
        }
        let grad = match weights {
            Some(w) if w.len() == n => backward(&self.params, &cache, &zbar)?.0,
            Some(_) => return Err(Error::shape("one weight per sample")),
            None => Vec::new(),
        };
        Ok((out, grad))
    }

    /// Single-state draw for environment interaction.
    pub fn act(&self, state: &[f64], seed: u64) -> Result<Vec<f64>> {
        Ok(self.sample(&Matrix::row_vector(state), seed)?.actions.into_data())
    }

    /// Single-state deterministic action, used for evaluation.
    pub fn act_greedy(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mean_action(&Matrix::row_vector(state))?.into_data())
    }
}
