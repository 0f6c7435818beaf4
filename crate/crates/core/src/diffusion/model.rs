use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{cosine_schedule, NoiseSchedule};
use crate::numkit::{
    backward, derive_seed, forward_batch, forward_cached, rng_from_seed, standard_normal_vec,
    Activation, Matrix, MlpSpec, OutputTransform, ParamVector,
};
use crate::optim::{adam_step, OptState};
use crate::{Error, Result};

/// Anything that predicts the injected noise ε from (s, x_k, k, w).
pub trait EpsPredictor {
    fn schedule(&self) -> &NoiseSchedule;
    fn action_dim(&self) -> usize;
    /// Rows of `states`/`x` are samples; `ks` and `w` hold one entry per row.
    fn predict_eps(&self, states: &Matrix, x: &Matrix, ks: &[usize], w: &[f64]) -> Result<Matrix>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModelConfig {
    pub hidden: Vec<usize>,
    /// Width of the sinusoidal step embedding (even).
    pub embed_dim: usize,
    pub activation: Activation,
    pub diffusion_steps: usize,
}

impl Default for ScoreModelConfig {
    fn default() -> Self {
        ScoreModelConfig {
            hidden: vec![256, 256, 256],
            embed_dim: 16,
            activation: Activation::Relu,
            diffusion_steps: 32,
        }
    }
}

/// ε_ω network with its schedule. Input row: [x_k, s, emb(k), w].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub params: ParamVector,
    pub schedule: NoiseSchedule,
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
}

/// Sinusoidal embedding of the step index: [sin(k f_i), cos(k f_i)] with
/// f_i = 10000^(−i/(d/2)).
pub fn timestep_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
    for i in 0..half {
        out.push((k as f64 * freq(i)).sin());
    }
    for i in 0..half {
        out.push((k as f64 * freq(i)).cos());
    }
    out
}

impl ScoreModel {
    pub fn new(state_dim: usize, action_dim: usize, config: &ScoreModelConfig, seed: u64) -> Result<ScoreModel> {
        if config.embed_dim == 0 || !config.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("step embedding width must be a positive even number"));
        }
        if action_dim == 0 {
            return Err(Error::invalid("action dimension must be positive"));
        }
        let input = action_dim + state_dim + config.embed_dim + 1;
        let spec = MlpSpec::with_hidden(
            input,
            &config.hidden,
            action_dim,
            config.activation,
            OutputTransform::Identity,
        )?;
        let params = spec.init(&mut rng_from_seed(seed));
        Ok(ScoreModel {
            params,
            schedule: cosine_schedule(config.diffusion_steps)?,
            state_dim,
            action_dim,
            embed_dim: config.embed_dim,
        })
    }

    /// Reassembles a model, checking that the network fits the dimensions.
    pub fn from_parts(
        params: ParamVector,
        schedule: NoiseSchedule,
        state_dim: usize,
        action_dim: usize,
        embed_dim: usize,
    ) -> Result<ScoreModel> {
        let spec = params.spec();
        if spec.input_dim() != action_dim + state_dim + embed_dim + 1 || spec.output_dim() != action_dim {
            return Err(Error::shape(format!(
                "network {}→{} does not fit state {state_dim}, action {action_dim}, embedding {embed_dim}",
                spec.input_dim(),
                spec.output_dim()
            )));
        }
        Ok(ScoreModel {
            params,
            schedule,
            state_dim,
            action_dim,
            embed_dim,
        })
    }

    pub fn with_params(&self, params: ParamVector) -> Result<ScoreModel> {
        ScoreModel::from_parts(params, self.schedule.clone(), self.state_dim, self.action_dim, self.embed_dim)
    }

    pub fn build_inputs(&self, states: &Matrix, x: &Matrix, ks: &[usize], w: &[f64]) -> Result<Matrix> {
        let n = x.rows();
        if states.rows() != n || ks.len() != n || w.len() != n {
            return Err(Error::shape("states, actions, steps and w must have one entry per sample"));
        }
        if states.cols() != self.state_dim || x.cols() != self.action_dim {
            return Err(Error::shape(format!(
                "expected state {} / action {}, got {} / {}",
                self.state_dim,
                self.action_dim,
                states.cols(),
                x.cols()
            )));
        }
        let k_max = self.schedule.steps();
        let width = self.params.spec().input_dim();
        let table: Vec<Vec<f64>> = (0..=k_max).map(|k| timestep_embedding(k, self.embed_dim)).collect();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            if ks[i] == 0 || ks[i] > k_max {
                return Err(Error::invalid(format!("diffusion step {} outside 1..={k_max}", ks[i])));
            }
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(states.row(i));
            data.extend_from_slice(&table[ks[i]]);
            data.push(w[i]);
        }
        Matrix::from_vec(n, width, data)
    }
}

impl EpsPredictor for ScoreModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict_eps(&self, states: &Matrix, x: &Matrix, ks: &[usize], w: &[f64]) -> Result<Matrix> {
        forward_batch(&self.params, &self.build_inputs(states, x, ks, w)?)
    }
}

/// Mean over the batch of ‖ε − ε_ω(√ᾱ_k a + √(1−ᾱ_k) ε, s, k, w)‖² with
/// k ~ U{1..K} and ε ~ N(0, I) drawn from `seed`, and its gradient in ω.
pub fn diffusion_loss(
    model: &ScoreModel,
    states: &Matrix,
    actions: &Matrix,
    w: &[f64],
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    diffusion_loss_with(model, &model.params, states, actions, w, seed)
}

/// [`diffusion_loss`] evaluated at alternative parameters.
pub fn diffusion_loss_with(
    model: &ScoreModel,
    params: &ParamVector,
    states: &Matrix,
    actions: &Matrix,
    w: &[f64],
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let n = actions.rows();
    if n == 0 {
        return Err(Error::invalid("diffusion loss needs a nonempty batch"));
    }
    let dim = model.action_dim;
    if actions.cols() != dim {
        return Err(Error::shape("action width does not match the model"));
    }
    let k_max = model.schedule.steps();
    let mut rng = rng_from_seed(seed);
    let mut ks = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n * dim);
    let mut noised = Vec::with_capacity(n * dim);
    for i in 0..n {
        let k = rng.random_range(1..=k_max);
        let e = standard_normal_vec(&mut rng, dim);
        let ab = model.schedule.alpha_bar(k);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (a, ej) in actions.row(i).iter().zip(&e) {
            noised.push(sa * a + sn * ej);
        }
        ks.push(k);
        eps.extend(e);
    }
    let noised = Matrix::from_vec(n, dim, noised)?;
    let inputs = model.build_inputs(states, &noised, &ks, w)?;
    let (pred, cache) = forward_cached(params, &inputs)?;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(n * dim);
    for (p, e) in pred.data().iter().zip(&eps) {
        let r = p - e;
        loss += r * r;
        upstream.push(2.0 * r * scale);
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::non_finite("diffusion loss"));
    }
    let (grad, _) = backward(params, &cache, &Matrix::from_vec(n, dim, upstream)?)?;
    Ok((loss, grad))
}

/// Raw k = 1 output ε_ω(s, a, w, 1), as consumed by the score-matching loss.
pub fn score_at_k1<P: EpsPredictor + ?Sized>(model: &P, s: &[f64], a: &[f64], w: f64) -> Result<Vec<f64>> {
    let out = model.predict_eps(&Matrix::row_vector(s), &Matrix::row_vector(a), &[1], &[w])?;
    Ok(out.into_data())
}

/// Batched [`score_at_k1`] with a shared `w`.
pub fn score_at_k1_batch<P: EpsPredictor + ?Sized>(
    model: &P,
    states: &Matrix,
    actions: &Matrix,
    w: f64,
) -> Result<Matrix> {
    let n = actions.rows();
    model.predict_eps(states, actions, &vec![1; n], &vec![w; n])
}

/// Score estimate −ε_ω(s, a, w, 1)/√(1−ᾱ_1) for comparison with analytic scores.
pub fn calibrated_score<P: EpsPredictor + ?Sized>(model: &P, s: &[f64], a: &[f64], w: f64) -> Result<Vec<f64>> {
    let scale = -1.0 / (1.0 - model.schedule().alpha_bar(1)).sqrt();
    Ok(score_at_k1(model, s, a, w)?.into_iter().map(|e| scale * e).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay target as a fraction of the initial rate; 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 256,
            learning_rate: 3e-4,
            final_lr_fraction: 1.0,
            seed: 0,
        }
    }
}

/// Adam on the diffusion loss with minibatches drawn uniformly with
/// replacement. Returns the trained model and the per-step losses.
pub fn train_score_model(
    model: &ScoreModel,
    states: &Matrix,
    actions: &Matrix,
    w: &[f64],
    config: &TrainConfig,
) -> Result<(ScoreModel, Vec<f64>)> {
    let n = actions.rows();
    if n == 0 || states.rows() != n || w.len() != n {
        return Err(Error::shape("training data must be nonempty with one row per sample"));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let mut params = model.params.clone();
    let mut opt = OptState::adam(params.len(), config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let (sd, ad) = (states.cols(), actions.cols());
    for step in 0..config.steps {
        let mut rng = rng_from_seed(derive_seed(config.seed, &[step as u64, 0]));
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let bs = Matrix::from_vec(idx.len(), sd, idx.iter().flat_map(|&i| states.row(i).to_vec()).collect())?;
        let ba = Matrix::from_vec(idx.len(), ad, idx.iter().flat_map(|&i| actions.row(i).to_vec()).collect())?;
        let bw: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
        let (loss, grad) = diffusion_loss_with(
            model,
            &params,
            &bs,
            &ba,
            &bw,
            derive_seed(config.seed, &[step as u64, 1]),
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::NumericAbort {
                step: step as u64,
                loss: "diffusion loss".into(),
            },
            other => other,
        })?;
        let progress = step as f64 / config.steps.max(1) as f64;
        let f = config.final_lr_fraction;
        opt.learning_rate = config.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (PI * progress).cos()));
        let (next, next_opt) = adam_step(&opt, &params, &grad)?;
        params = next;
        opt = next_opt;
        losses.push(loss);
    }
    Ok((model.with_params(params)?, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_diff_check;

    fn small_model(seed: u64) -> ScoreModel {
        let cfg = ScoreModelConfig {
            hidden: vec![8, 8],
            embed_dim: 4,
            activation: Activation::Tanh,
            diffusion_steps: 8,
        };
        ScoreModel::new(2, 2, &cfg, seed).unwrap()
    }

    fn batch(n: usize, seed: u64) -> (Matrix, Matrix, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let s = Matrix::from_vec(n, 2, standard_normal_vec(&mut rng, 2 * n)).unwrap();
        let a = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        (s, a, w)
    }

    #[test]
    fn zero_model_loss_is_action_dim() {
        let mut m = small_model(0);
        m.params = m.params.spec().zeros();
        let (s, a, w) = batch(20_000, 1);
        let (loss, _) = diffusion_loss(&m, &s, &a, &w, 3).unwrap();
        // E‖ε‖² = 2, sd of the mean ≈ √(2·2/n)
        assert!((loss - 2.0).abs() < 4.0 * (4.0 / 20_000f64).sqrt(), "{loss}");
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        // replay the same draws the loss makes and compare against them
        let m = small_model(0);
        let (_, a, _) = batch(16, 2);
        let seed = 9;
        let mut rng = rng_from_seed(seed);
        let mut resid = 0.0;
        for i in 0..16 {
            let k = rng.random_range(1..=m.schedule.steps());
            let e = standard_normal_vec(&mut rng, 2);
            let x = super::super::noise_action(a.row(i), k, &m.schedule, &e).unwrap();
            let ab = m.schedule.alpha_bar(k);
            // an oracle that knows a0 recovers ε exactly
            let recovered: Vec<f64> = x
                .iter()
                .zip(a.row(i))
                .map(|(xi, ai)| (xi - ab.sqrt() * ai) / (1.0 - ab).sqrt())
                .collect();
            resid += recovered.iter().zip(&e).map(|(r, t)| (r - t).powi(2)).sum::<f64>();
        }
        assert!(resid < 1e-20);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let m = small_model(seed);
            let (s, a, w) = batch(6, 100 + seed);
            let (_, grad) = diffusion_loss(&m, &s, &a, &w, 5).unwrap();
            let report = finite_diff_check(
                |v| {
                    let p = m.params.with_values(v.to_vec()).unwrap();
                    diffusion_loss_with(&m, &p, &s, &a, &w, 5).unwrap().0
                },
                &grad,
                m.params.values(),
                1e-6,
                None,
            );
            assert!(report.max_rel_error <= 1e-5, "{report:?}");
        }
    }

    #[test]
    fn shape_and_step_errors() {
        let m = small_model(0);
        let (s, a, w) = batch(3, 0);
        assert!(m.predict_eps(&s, &a, &[1, 9, 1], &w).is_err());
        assert!(m.predict_eps(&s, &a, &[1, 0, 1], &w).is_err());
        assert!(m.predict_eps(&s, &a, &[1, 1], &w).is_err());
        assert!(diffusion_loss(&m, &Matrix::zeros(0, 2), &Matrix::zeros(0, 2), &[], 0).is_err());
        assert!(ScoreModel::from_parts(m.params.clone(), m.schedule.clone(), 3, 2, 4).is_err());
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let e1 = timestep_embedding(1, 16);
        let e2 = timestep_embedding(2, 16);
        assert_eq!(e1.len(), 16);
        assert!(e1.iter().zip(&e2).any(|(a, b)| (a - b).abs() > 0.1));
        assert!((e1[0] - 1f64.sin()).abs() < 1e-15);
    }
}
