//! Parameter-update rules: Adam, Muon and Polyak target averaging.
//!
//! Optimizer steps are pure: they take the current state and return the
//! updated parameters and state.

use serde::{Deserialize, Serialize};

use crate::numkit::{LayerBlock, Matrix, ParamVector};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Muon,
}

/// Polynomial schedule used by [`newton_schulz_orthogonalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NsSchedule {
    /// Reference Muon quintic `(3.4445, −4.7750, 2.0315)` on every iteration.
    /// Fast growth of small singular values but it only brings them into
    /// roughly [0.68, 1.2], so orthogonal inputs are not fixed points.
    Reference,
    /// Reference quintic for all but the last two iterations, then the
    /// convergent quintic `(15, −10, 3)/8` (fixed point at 1 with vanishing
    /// first and second derivative) to polish singular values onto 1.
    #[default]
    Polished,
}

pub const NS_REFERENCE_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
pub const NS_POLISH_COEFFS: (f64, f64, f64) = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0);
pub const NS_ITERATIONS: usize = 5;
const NS_POLISH_STEPS: usize = 2;

/// Approximates the orthogonal polar factor `U Vᵀ` of `g = U Σ Vᵀ`.
///
/// The input is scaled by its Frobenius norm (so every singular value is in
/// (0, 1]) and then iterated `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`. Wide inputs are
/// transposed so that `XXᵀ` is the smaller Gram matrix.
pub fn newton_schulz_orthogonalize(g: &Matrix, iterations: usize) -> Result<Matrix> {
    newton_schulz_with(g, iterations, NsSchedule::default())
}

pub fn newton_schulz_with(g: &Matrix, iterations: usize, schedule: NsSchedule) -> Result<Matrix> {
    let norm = g.frobenius_norm();
    if !norm.is_finite() {
        return Err(Error::non_finite("newton-schulz input"));
    }
    if norm == 0.0 {
        return Err(Error::invalid("cannot orthogonalize a zero matrix"));
    }
    // rows ≤ cols keeps XXᵀ small
    let transposed = g.rows() > g.cols();
    let mut x = if transposed { g.transpose() } else { g.clone() };
    x = x.scale(1.0 / norm);
    for it in 0..iterations {
        let (a, b, c) = match schedule {
            NsSchedule::Reference => NS_REFERENCE_COEFFS,
            NsSchedule::Polished => {
                if it + NS_POLISH_STEPS >= iterations.max(NS_POLISH_STEPS + 1) {
                    NS_POLISH_COEFFS
                } else {
                    NS_REFERENCE_COEFFS
                }
            }
        };
        let gram = x.gram();
        let gram2 = gram.matmul(&gram)?;
        let poly = gram.lin_comb(b, &gram2, c)?;
        x = x.lin_comb(a, &poly.matmul(&x)?, 1.0)?;
    }
    if !x.is_finite() {
        return Err(Error::non_finite("newton-schulz output"));
    }
    Ok(if transposed { x.transpose() } else { x })
}

/// Per-network optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Muon momentum coefficient.
    pub momentum: f64,
    /// Adam first moment, or Muon momentum buffer.
    pub m: Vec<f64>,
    /// Adam second moment; empty for Muon.
    pub v: Vec<f64>,
}

impl OptState {
    pub fn adam(len: usize, learning_rate: f64) -> Self {
        OptState {
            kind: OptimizerKind::Adam,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn muon(len: usize, learning_rate: f64) -> Self {
        OptState {
            kind: OptimizerKind::Muon,
            step_count: 0,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            momentum: 0.95,
            m: vec![0.0; len],
            v: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, len: usize, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Adam => OptState::adam(len, learning_rate),
            OptimizerKind::Muon => OptState::muon(len, learning_rate),
        }
    }
}

fn check_grad(state: &OptState, params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer buffers {} / params {} / grad {}",
            state.m.len(),
            params.len(),
            grad.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!("gradient coordinate {i}")));
    }
    Ok(())
}

/// Adam with bias correction on a flat slice.
pub fn adam_step_slice(state: &OptState, params: &[f64], grad: &[f64]) -> Result<(Vec<f64>, OptState)> {
    if state.kind != OptimizerKind::Adam {
        return Err(Error::invalid("adam_step needs an Adam state"));
    }
    check_grad(state, params, grad)?;
    if state.v.len() != params.len() {
        return Err(Error::shape("adam second-moment buffer length"));
    }
    let mut next = state.clone();
    next.step_count += 1;
    let t = next.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut out = params.to_vec();
    for i in 0..params.len() {
        let g = grad[i];
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        out[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok((out, next))
}

pub fn adam_step(state: &OptState, params: &ParamVector, grad: &[f64]) -> Result<(ParamVector, OptState)> {
    let (values, next) = adam_step_slice(state, params.values(), grad)?;
    Ok((params.with_values(values)?, next))
}

/// Muon over an explicit block layout. Blocks listed in `matrices` are
/// orthogonalised; every other coordinate gets Nesterov momentum SGD.
pub fn muon_step_blocks(
    state: &OptState,
    params: &[f64],
    grad: &[f64],
    matrices: &[MatrixBlock],
) -> Result<(Vec<f64>, OptState)> {
    if state.kind != OptimizerKind::Muon {
        return Err(Error::invalid("muon_step needs a Muon state"));
    }
    check_grad(state, params, grad)?;
    let mu = state.momentum;
    let lr = state.learning_rate;
    let mut next = state.clone();
    next.step_count += 1;
    // Nesterov lookahead: u = g + μ·(μ·m + g)
    let mut lookahead = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        next.m[i] = mu * state.m[i] + grad[i];
        lookahead[i] = grad[i] + mu * next.m[i];
    }
    let mut out = params.to_vec();
    let mut covered = vec![false; params.len()];
    for blk in matrices {
        let end = blk.offset + blk.rows * blk.cols;
        if end > params.len() {
            return Err(Error::shape("matrix block outside parameter vector"));
        }
        covered[blk.offset..end].iter_mut().for_each(|c| *c = true);
        let u = Matrix::from_vec(blk.rows, blk.cols, lookahead[blk.offset..end].to_vec())?;
        if u.frobenius_norm() == 0.0 {
            continue;
        }
        let o = newton_schulz_orthogonalize(&u, NS_ITERATIONS)?;
        for (p, d) in out[blk.offset..end].iter_mut().zip(o.data()) {
            *p -= lr * d;
        }
    }
    for i in 0..params.len() {
        if !covered[i] {
            out[i] -= lr * lookahead[i];
        }
    }
    Ok((out, next))
}

/// A 2-D parameter block inside a flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatrixBlock {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl From<LayerBlock> for MatrixBlock {
    fn from(b: LayerBlock) -> Self {
        MatrixBlock {
            offset: b.weight_offset,
            rows: b.rows,
            cols: b.cols,
        }
    }
}

pub fn weight_blocks(params: &ParamVector) -> Vec<MatrixBlock> {
    params.spec().blocks().into_iter().map(MatrixBlock::from).collect()
}

/// Muon on a network: weight matrices are orthogonalised, biases use
/// momentum SGD.
pub fn muon_step(state: &OptState, params: &ParamVector, grad: &[f64]) -> Result<(ParamVector, OptState)> {
    let (values, next) = muon_step_blocks(state, params.values(), grad, &weight_blocks(params))?;
    Ok((params.with_values(values)?, next))
}

/// Dispatches on the state's kind.
pub fn optimizer_step(state: &OptState, params: &ParamVector, grad: &[f64]) -> Result<(ParamVector, OptState)> {
    match state.kind {
        OptimizerKind::Adam => adam_step(state, params, grad),
        OptimizerKind::Muon => muon_step(state, params, grad),
    }
}

/// `λ·online + (1 − λ)·target`, per coordinate.
pub fn polyak_update(target: &ParamVector, online: &ParamVector, lambda: f64) -> Result<ParamVector> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!("polyak coefficient {lambda} outside (0, 1]")));
    }
    if target.len() != online.len() {
        return Err(Error::shape(format!(
            "polyak target has {} values, online {}",
            target.len(),
            online.len()
        )));
    }
    let values = target
        .values()
        .iter()
        .zip(online.values())
        .map(|(t, o)| lambda * o + (1.0 - lambda) * t)
        .collect();
    target.with_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{rng_from_seed, standard_normal_vec, Activation, MlpSpec, OutputTransform};
    use proptest::prelude::*;

    fn spec_1x1() -> MlpSpec {
        MlpSpec::new(vec![1, 1], Activation::Tanh, OutputTransform::Identity).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = ParamVector::new(spec_1x1(), vec![0.3, -0.7]).unwrap();
        let s = OptState::adam(2, 0.1);
        let (q, s2) = adam_step(&s, &p, &[0.0, 0.0]).unwrap();
        assert_eq!(q, p);
        assert_eq!(s2.step_count, 1);
    }

    #[test]
    fn adam_first_step_hand_value() {
        // m̂ = 1, v̂ = 1 after bias correction: Δ = −δ / (1 + ε)
        let s = OptState::adam(1, 0.1);
        let (p, _) = adam_step_slice(&s, &[0.0], &[1.0]).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut s = OptState::adam(2, 0.01);
        let mut p = vec![0.0, 0.0];
        let mut last = vec![0.0, 0.0];
        for _ in 0..2000 {
            let (q, s2) = adam_step_slice(&s, &p, &[3.0, -0.5]).unwrap();
            last = vec![q[0] - p[0], q[1] - p[1]];
            p = q;
            s = s2;
        }
        assert!((last[0] + 0.01).abs() < 1e-6);
        assert!((last[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_nan() {
        let s = OptState::adam(1, 0.1);
        assert!(adam_step_slice(&s, &[0.0], &[f64::NAN]).is_err());
        let m = OptState::muon(1, 0.1);
        assert!(adam_step_slice(&m, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn ns_rejects_zero() {
        assert!(newton_schulz_orthogonalize(&Matrix::zeros(3, 2), 5).is_err());
    }

    #[test]
    fn ns_diag_goes_to_identity() {
        let g = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let o = newton_schulz_orthogonalize(&g, NS_ITERATIONS).unwrap();
        assert!((o.get(0, 0) - 1.0).abs() < 1e-2, "{o:?}");
        assert!((o.get(1, 1) - 1.0).abs() < 1e-2, "{o:?}");
        assert!(o.get(0, 1).abs() < 1e-12 && o.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn ns_reference_schedule_is_not_a_fixed_point_on_identity() {
        let o = newton_schulz_with(&Matrix::identity(1), 5, NsSchedule::Reference).unwrap();
        assert!((o.get(0, 0) - 0.6964).abs() < 1e-3);
    }

    #[test]
    fn muon_zero_gradient_keeps_params() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
        let p = spec.init(&mut rng_from_seed(1));
        let s = OptState::muon(p.len(), 0.02);
        let (q, _) = muon_step(&s, &p, &vec![0.0; p.len()]).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn muon_bias_only_layout_is_nesterov_sgd() {
        let s = OptState::muon(3, 0.1);
        let params = [1.0, 2.0, 3.0];
        let g1 = [0.5, -1.0, 0.0];
        let (p1, s1) = muon_step_blocks(&s, &params, &g1, &[]).unwrap();
        let g2 = [0.1, 0.2, 0.3];
        let (p2, _) = muon_step_blocks(&s1, &p1, &g2, &[]).unwrap();
        // hand recurrence
        let mut m = [0.0; 3];
        let mut p = params;
        for g in [g1, g2] {
            for i in 0..3 {
                m[i] = 0.95 * m[i] + g[i];
                p[i] -= 0.1 * (g[i] + 0.95 * m[i]);
            }
        }
        assert_eq!(p2, p.to_vec());
    }

    #[test]
    fn muon_rank_one_gradient_moves_along_uv() {
        let u = [0.6, 0.8, 0.0];
        let v = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let mut g = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                g[i * 2 + j] = 7.0 * u[i] * v[j];
            }
        }
        let block = MatrixBlock { offset: 0, rows: 3, cols: 2 };
        let s = OptState::muon(6, 0.05);
        let (p, _) = muon_step_blocks(&s, &[0.0; 6], &g, &[block]).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((p[i * 2 + j] + 0.05 * u[i] * v[j]).abs() < 1e-3 * 0.05);
            }
        }
    }

    #[test]
    fn polyak_cases() {
        let spec = spec_1x1();
        let t = ParamVector::new(spec.clone(), vec![0.0, 0.0]).unwrap();
        let o = ParamVector::new(spec.clone(), vec![1.0, 1.0]).unwrap();
        assert_eq!(polyak_update(&t, &o, 1.0).unwrap(), o);
        let p = polyak_update(&t, &o, 0.005).unwrap();
        assert!((p.values()[0] - 0.005).abs() < 1e-15);
        let mut cur = t.clone();
        for _ in 0..5000 {
            cur = polyak_update(&cur, &o, 0.005).unwrap();
        }
        assert!((cur.values()[0] - 1.0).abs() < 1e-9);
        assert!(polyak_update(&t, &o, 0.0).is_err());
        let other = MlpSpec::new(vec![2, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
        assert!(polyak_update(&t, &other.zeros(), 0.5).is_err());
    }

    proptest! {
        #[test]
        fn polyak_monotone_in_lambda(t in -5.0f64..5.0, o in -5.0f64..5.0, l1 in 0.001f64..1.0, l2 in 0.001f64..1.0) {
            let spec = MlpSpec::new(vec![1, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
            let tv = ParamVector::new(spec.clone(), vec![t, t]).unwrap();
            let ov = ParamVector::new(spec, vec![o, o]).unwrap();
            let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
            let a = polyak_update(&tv, &ov, lo).unwrap().values()[0];
            let b = polyak_update(&tv, &ov, hi).unwrap().values()[0];
            prop_assert!(a.is_finite() && b.is_finite());
            prop_assert!((b - o).abs() <= (a - o).abs() + 1e-12);
        }

        #[test]
        fn optimizers_are_deterministic(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, OutputTransform::Identity).unwrap();
            let p = spec.init(&mut rng);
            let g = standard_normal_vec(&mut rng, p.len());
            for s in [OptState::adam(p.len(), 1e-3), OptState::muon(p.len(), 1e-3)] {
                let a = optimizer_step(&s, &p, &g).unwrap();
                let b = optimizer_step(&s, &p, &g).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
