use serde::{Deserialize, Serialize};

use crate::numkit::{
    backward, derive_seed, forward_batch, forward_cached, rng_from_seed, Activation, Matrix,
    MlpSpec, OutputTransform, ParamVector,
};
use crate::optim::polyak_update;
use crate::{Error, Result};

/// Concatenates states and actions row-wise into critic inputs.
pub(crate) fn critic_inputs(states: &Matrix, actions: &Matrix) -> Result<Matrix> {
    if states.rows() != actions.rows() {
        return Err(Error::shape("states and actions need the same number of rows"));
    }
    let (sd, ad) = (states.cols(), actions.cols());
    let mut out = Matrix::zeros(states.rows(), sd + ad);
    for i in 0..states.rows() {
        let row = out.row_mut(i);
        row[..sd].copy_from_slice(states.row(i));
        row[sd..].copy_from_slice(actions.row(i));
    }
    Ok(out)
}

/// Q(s, a) for one network.
pub fn q_values(params: &ParamVector, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
    Ok(forward_batch(params, &critic_inputs(states, actions)?)?.into_data())
}

/// Q(s, a) and ∇_a Q(s, a) for one network.
pub fn q_values_and_action_grads(
    params: &ParamVector,
    states: &Matrix,
    actions: &Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    let x = critic_inputs(states, actions)?;
    let (y, cache) = forward_cached(params, &x)?;
    let (_, xbar) = backward(params, &cache, &Matrix::from_vec(y.rows(), 1, vec![1.0; y.rows()])?)?;
    let sd = states.cols();
    let mut grads = Matrix::zeros(actions.rows(), actions.cols());
    for i in 0..actions.rows() {
        grads.row_mut(i).copy_from_slice(&xbar.row(i)[sd..]);
    }
    if !grads.is_finite() {
        return Err(Error::non_finite("action gradient of Q"));
    }
    Ok((y.into_data(), grads))
}

/// An action-value function seen from the policy side.
pub trait ActionValue {
    fn value(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>>;
    fn value_and_action_grad(&self, states: &Matrix, actions: &Matrix) -> Result<(Vec<f64>, Matrix)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Min,
    Mean,
}

/// N online critics with matching target copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticEnsemble {
    pub members: Vec<ParamVector>,
    pub targets: Vec<ParamVector>,
}

impl CriticEnsemble {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        size: usize,
        seed: u64,
    ) -> Result<CriticEnsemble> {
        let spec = MlpSpec::with_hidden(state_dim + action_dim, hidden, 1, activation, OutputTransform::Identity)?;
        let members: Vec<ParamVector> = (0..size)
            .map(|i| spec.init(&mut rng_from_seed(derive_seed(seed, &[i as u64]))))
            .collect();
        CriticEnsemble::from_parts(members.clone(), members)
    }

    pub fn from_parts(members: Vec<ParamVector>, targets: Vec<ParamVector>) -> Result<CriticEnsemble> {
        if members.len() < 2 {
            return Err(Error::invalid("a critic ensemble needs at least two members"));
        }
        if targets.len() != members.len() {
            return Err(Error::shape("one target per ensemble member"));
        }
        let spec = members[0].spec();
        if spec.output_dim() != 1 || members.iter().chain(&targets).any(|p| p.spec() != spec) {
            return Err(Error::shape("ensemble members and targets must share a scalar-output architecture"));
        }
        Ok(CriticEnsemble { members, targets })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].spec().input_dim()
    }

    /// θ̄ ← λθ + (1−λ)θ̄ for every member.
    pub fn polyak(&mut self, lambda: f64) -> Result<()> {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            *t = polyak_update(t, m, lambda)?;
        }
        Ok(())
    }

    pub fn online(&self, aggregate: Aggregate) -> EnsembleView<'_> {
        EnsembleView {
            nets: &self.members,
            aggregate,
        }
    }

    pub fn target(&self, aggregate: Aggregate) -> EnsembleView<'_> {
        EnsembleView {
            nets: &self.targets,
            aggregate,
        }
    }
}

/// Min or mean over a set of critics. For the minimum the action gradient is
/// that of the minimizing member (first on ties).
#[derive(Clone, Copy, Debug)]
pub struct EnsembleView<'a> {
    pub nets: &'a [ParamVector],
    pub aggregate: Aggregate,
}

impl<'a> EnsembleView<'a> {
    pub fn member_values(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<Vec<f64>>> {
        let x = critic_inputs(states, actions)?;
        self.nets
            .iter()
            .map(|p| Ok(forward_batch(p, &x)?.into_data()))
            .collect()
    }
}

fn aggregate_rows(values: &[Vec<f64>], agg: Aggregate) -> (Vec<f64>, Vec<usize>) {
    let n = values[0].len();
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for i in 0..n {
        match agg {
            Aggregate::Min => {
                let mut best = 0;
                for (m, v) in values.iter().enumerate().skip(1) {
                    if v[i] < values[best][i] {
                        best = m;
                    }
                }
                out.push(values[best][i]);
                arg.push(best);
            }
            Aggregate::Mean => {
                out.push(values.iter().map(|v| v[i]).sum::<f64>() / values.len() as f64);
                arg.push(0);
            }
        }
    }
    (out, arg)
}

impl ActionValue for EnsembleView<'_> {
    fn value(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        let vals = self.member_values(states, actions)?;
        let (out, _) = aggregate_rows(&vals, self.aggregate);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("ensemble Q"));
        }
        Ok(out)
    }

    fn value_and_action_grad(&self, states: &Matrix, actions: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let per: Vec<(Vec<f64>, Matrix)> = self
            .nets
            .iter()
            .map(|p| q_values_and_action_grads(p, states, actions))
            .collect::<Result<_>>()?;
        let vals: Vec<Vec<f64>> = per.iter().map(|(v, _)| v.clone()).collect();
        let (out, arg) = aggregate_rows(&vals, self.aggregate);
        let mut grads = Matrix::zeros(actions.rows(), actions.cols());
        let inv = 1.0 / per.len() as f64;
        for i in 0..actions.rows() {
            let row = grads.row_mut(i);
            match self.aggregate {
                Aggregate::Min => row.copy_from_slice(per[arg[i]].1.row(i)),
                Aggregate::Mean => {
                    for (_, g) in &per {
                        for (r, gv) in row.iter_mut().zip(g.row(i)) {
                            *r += inv * gv;
                        }
                    }
                }
            }
        }
        Ok((out, grads))
    }
}

/// State-conditioned scalar network; used for α_ψ(s) and for IQL's V(s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateScalar {
    pub params: ParamVector,
}

impl StateScalar {
    pub fn new(state_dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<StateScalar> {
        let spec = MlpSpec::with_hidden(state_dim, hidden, 1, activation, OutputTransform::Identity)?;
        Ok(StateScalar {
            params: spec.init(&mut rng_from_seed(seed)),
        })
    }

    pub fn from_params(params: ParamVector) -> Result<StateScalar> {
        if params.spec().output_dim() != 1 {
            return Err(Error::shape("state network must have scalar output"));
        }
        Ok(StateScalar { params })
    }

    pub fn eval(&self, states: &Matrix) -> Result<Vec<f64>> {
        let out = forward_batch(&self.params, states)?.into_data();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("state network output"));
        }
        Ok(out)
    }

    /// Outputs and the parameter gradient of `Σ_i upstream_i·f(s_i)`.
    pub fn eval_grad(&self, states: &Matrix, upstream: impl Fn(usize, f64) -> f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (y, cache) = forward_cached(&self.params, states)?;
        let vals = y.into_data();
        let ybar: Vec<f64> = vals.iter().enumerate().map(|(i, &v)| upstream(i, v)).collect();
        let (g, _) = backward(&self.params, &cache, &Matrix::from_vec(vals.len(), 1, ybar)?)?;
        Ok((vals, g))
    }
}

/// α_ψ(s), unconstrained in sign.
pub type AlphaNet = StateScalar;
/// IQL state value V(s).
pub type ValueNet = StateScalar;
