//! Multi-layer perceptrons over flat parameter vectors.
//!
//! Layer `l` maps `h_{l-1}` to `z_l = h_{l-1} W_lᵀ + b_l`; hidden layers apply
//! the activation, the last layer applies the output transform. Parameters
//! are stored layer by layer as `W_l` (fan_out × fan_in, row-major) followed
//! by `b_l`.
//!
//! Besides the usual reverse pass, [`forward_tangent`] / [`backward_dual`]
//! push a tangent `ẋ` through the network and then differentiate both the
//! primal output and its directional derivative. That is what a loss on the
//! input-gradient `∇ₓ y` (e.g. a penalty on a critic's action gradient)
//! needs: for fixed `v`, `∂/∂θ ⟨v, ∇ₓ y⟩ = ∂/∂θ ẏ` with `ẋ = v`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm_into, Matrix, View};
use crate::{Error, Result};

/// Pre-activation clamp applied by [`OutputTransform::Exp`].
pub const EXP_CLAMP_LOW: f64 = -10.0;
pub const EXP_CLAMP_HIGH: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// First derivative, given pre-activation `z` and output `h`.
    #[inline]
    fn d1(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }

    #[inline]
    fn d2(self, _z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => -2.0 * h * (1.0 - h * h),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    TanhSquash,
    /// `exp(clamp(z, EXP_CLAMP_LOW, EXP_CLAMP_HIGH))`
    Exp,
}

impl OutputTransform {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputTransform::Identity => z,
            OutputTransform::TanhSquash => z.tanh(),
            OutputTransform::Exp => z.clamp(EXP_CLAMP_LOW, EXP_CLAMP_HIGH).exp(),
        }
    }

    #[inline]
    fn d1(self, z: f64, y: f64) -> f64 {
        match self {
            OutputTransform::Identity => 1.0,
            OutputTransform::TanhSquash => 1.0 - y * y,
            OutputTransform::Exp => {
                if (EXP_CLAMP_LOW..=EXP_CLAMP_HIGH).contains(&z) {
                    y
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    fn d2(self, z: f64, y: f64) -> f64 {
        match self {
            OutputTransform::Identity => 0.0,
            OutputTransform::TanhSquash => -2.0 * y * (1.0 - y * y),
            OutputTransform::Exp => self.d1(z, y),
        }
    }
}

/// Architecture of a fully connected network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_transform: OutputTransform,
}

/// Location of one layer's weights and biases inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerBlock {
    pub weight_offset: usize,
    /// fan_out
    pub rows: usize,
    /// fan_in
    pub cols: usize,
    pub bias_offset: usize,
}

impl LayerBlock {
    fn weights<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.weight_offset..self.weight_offset + self.rows * self.cols]
    }

    fn bias<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.bias_offset..self.bias_offset + self.rows]
    }
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            activation,
            output_transform,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Input width, hidden widths, output width.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        MlpSpec::new(widths, activation, output_transform)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least two layer widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn blocks(&self) -> Vec<LayerBlock> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let block = LayerBlock {
                    weight_offset: offset,
                    rows: fan_out,
                    cols: fan_in,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                block
            })
            .collect()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        for b in self.blocks() {
            let limit = (6.0 / (b.rows + b.cols) as f64).sqrt();
            for v in &mut values[b.weight_offset..b.weight_offset + b.rows * b.cols] {
                *v = rng.random_range(-limit..limit);
            }
        }
        ParamVector {
            spec: self.clone(),
            values,
        }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            spec: self.clone(),
            values: vec![0.0; self.param_count()],
        }
    }
}

/// Flat parameters of one network, tied to its architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    spec: MlpSpec,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: MlpSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        Ok(ParamVector { spec, values })
    }

    /// Same architecture, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(self.spec.clone(), values)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Unflattens into per-layer `(W, b)` pairs.
    pub fn layers(&self) -> Vec<(Matrix, Vec<f64>)> {
        self.spec
            .blocks()
            .iter()
            .map(|b| {
                (
                    Matrix::from_vec_unchecked(b.rows, b.cols, b.weights(&self.values).to_vec()),
                    b.bias(&self.values).to_vec(),
                )
            })
            .collect()
    }

    /// Flattens per-layer `(W, b)` pairs.
    pub fn from_layers(spec: MlpSpec, layers: &[(Matrix, Vec<f64>)]) -> Result<Self> {
        spec.validate()?;
        let blocks = spec.blocks();
        if blocks.len() != layers.len() {
            return Err(Error::shape("layer count differs from spec"));
        }
        let mut values = Vec::with_capacity(spec.param_count());
        for (b, (w, bias)) in blocks.iter().zip(layers) {
            if w.rows() != b.rows || w.cols() != b.cols || bias.len() != b.rows {
                return Err(Error::shape("layer shape differs from spec"));
            }
            values.extend_from_slice(w.data());
            values.extend_from_slice(bias);
        }
        ParamVector::new(spec, values)
    }
}

/// Intermediate values of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Matrix,
    /// `z_l` for every layer.
    pre: Vec<Matrix>,
    /// `h_l` for hidden layers; the transformed output for the last one.
    post: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.post.last().expect("at least one layer")
    }
}

/// Forward cache plus the tangents `ż_l`, `ḣ_l` of a directional derivative.
#[derive(Clone, Debug)]
pub struct DualCache {
    primal: ForwardCache,
    input_tangent: Matrix,
    pre_tangent: Vec<Matrix>,
    post_tangent: Vec<Matrix>,
}

impl DualCache {
    pub fn output(&self) -> &Matrix {
        self.primal.output()
    }

    pub fn output_tangent(&self) -> &Matrix {
        self.post_tangent.last().expect("at least one layer")
    }
}

fn check_input(params: &ParamVector, x: &Matrix) -> Result<()> {
    if x.cols() != params.spec.input_dim() {
        return Err(Error::shape(format!(
            "network expects input width {}, got {}",
            params.spec.input_dim(),
            x.cols()
        )));
    }
    Ok(())
}

fn affine(h: &Matrix, w: &[f64], bias: Option<&[f64]>, fan_out: usize) -> Matrix {
    let fan_in = h.cols();
    let mut z = Matrix::zeros(h.rows(), fan_out);
    if let Some(b) = bias {
        for i in 0..h.rows() {
            z.row_mut(i).copy_from_slice(b);
        }
    }
    // z = h Wᵀ (+ b)
    gemm_into(
        View::new(h.data(), h.rows(), fan_in),
        View::new(w, fan_out, fan_in).t(),
        if bias.is_some() { 1.0 } else { 0.0 },
        z.data_mut(),
    );
    z
}

/// Batched forward pass; rows of `x` are samples.
pub fn forward_batch(params: &ParamVector, x: &Matrix) -> Result<Matrix> {
    forward_cached(params, x).map(|(y, _)| y)
}

pub fn forward_cached(params: &ParamVector, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    check_input(params, x)?;
    let spec = &params.spec;
    let blocks = spec.blocks();
    let last = blocks.len() - 1;
    let mut pre = Vec::with_capacity(blocks.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(blocks.len());
    for (l, b) in blocks.iter().enumerate() {
        let h = if l == 0 { x } else { &post[l - 1] };
        let z = affine(h, b.weights(&params.values), Some(b.bias(&params.values)), b.rows);
        if !z.is_finite() {
            return Err(Error::NonFiniteLayer { layer: l });
        }
        let out = if l == last {
            let t = spec.output_transform;
            Matrix::from_vec_unchecked(
                z.rows(),
                z.cols(),
                z.data().iter().map(|&v| t.apply(v)).collect(),
            )
        } else {
            let a = spec.activation;
            Matrix::from_vec_unchecked(
                z.rows(),
                z.cols(),
                z.data().iter().map(|&v| a.apply(v)).collect(),
            )
        };
        pre.push(z);
        post.push(out);
    }
    let y = post[last].clone();
    Ok((
        y,
        ForwardCache {
            input: x.clone(),
            pre,
            post,
        },
    ))
}

/// Forward pass carrying the tangent `ẋ` (same shape as `x`). Returns the
/// output `y`, its directional derivative `ẏ = J_x y · ẋ`, and the cache.
pub fn forward_tangent(
    params: &ParamVector,
    x: &Matrix,
    x_tangent: &Matrix,
) -> Result<(Matrix, Matrix, DualCache)> {
    if x_tangent.rows() != x.rows() || x_tangent.cols() != x.cols() {
        return Err(Error::shape("tangent must match input shape"));
    }
    let (y, primal) = forward_cached(params, x)?;
    let spec = &params.spec;
    let blocks = spec.blocks();
    let last = blocks.len() - 1;
    let mut pre_tangent = Vec::with_capacity(blocks.len());
    let mut post_tangent: Vec<Matrix> = Vec::with_capacity(blocks.len());
    for (l, b) in blocks.iter().enumerate() {
        let hdot = if l == 0 { x_tangent } else { &post_tangent[l - 1] };
        let zdot = affine(hdot, b.weights(&params.values), None, b.rows);
        let z = &primal.pre[l];
        let h = &primal.post[l];
        let mut out = Matrix::zeros(zdot.rows(), zdot.cols());
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            let d = if l == last {
                spec.output_transform.d1(z.data()[k], h.data()[k])
            } else {
                spec.activation.d1(z.data()[k], h.data()[k])
            };
            *o = d * zdot.data()[k];
        }
        if !out.is_finite() {
            return Err(Error::NonFiniteLayer { layer: l });
        }
        pre_tangent.push(zdot);
        post_tangent.push(out);
    }
    let ydot = post_tangent[last].clone();
    Ok((
        y,
        ydot,
        DualCache {
            primal,
            input_tangent: x_tangent.clone(),
            pre_tangent,
            post_tangent,
        },
    ))
}

/// Reverse pass: gradient of `Σ ⟨upstream, y⟩` over the batch with respect to
/// the parameters (summed over samples) and the inputs (per sample).
pub fn backward(
    params: &ParamVector,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    let (g, xbar, _) = backward_impl(params, cache, None, upstream, None)?;
    Ok((g, xbar))
}

/// Reverse pass through a tangent-augmented forward pass: gradient of
/// `Σ ⟨ȳ, y⟩ + ⟨ẏ̄, ẏ⟩` with respect to parameters, inputs and input tangents.
pub fn backward_dual(
    params: &ParamVector,
    cache: &DualCache,
    upstream: &Matrix,
    upstream_tangent: &Matrix,
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    let (g, xbar, xdotbar) = backward_impl(
        params,
        &cache.primal,
        Some(cache),
        upstream,
        Some(upstream_tangent),
    )?;
    Ok((g, xbar, xdotbar.expect("tangent pass requested")))
}

fn backward_impl(
    params: &ParamVector,
    cache: &ForwardCache,
    dual: Option<&DualCache>,
    upstream: &Matrix,
    upstream_tangent: Option<&Matrix>,
) -> Result<(Vec<f64>, Matrix, Option<Matrix>)> {
    let spec = &params.spec;
    let blocks = spec.blocks();
    let last = blocks.len() - 1;
    let out = cache.output();
    if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
        return Err(Error::shape(format!(
            "upstream {}x{} does not match output {}x{}",
            upstream.rows(),
            upstream.cols(),
            out.rows(),
            out.cols()
        )));
    }
    if let Some(ut) = upstream_tangent {
        if ut.rows() != out.rows() || ut.cols() != out.cols() {
            return Err(Error::shape("tangent upstream does not match output"));
        }
    }
    let values = &params.values;
    let mut grad = vec![0.0; values.len()];

    // adjoints of z_L and ż_L
    let z = &cache.pre[last];
    let y = &cache.post[last];
    let t = spec.output_transform;
    let mut zbar = Matrix::zeros(z.rows(), z.cols());
    let mut zdotbar = dual.map(|_| Matrix::zeros(z.rows(), z.cols()));
    for k in 0..z.data().len() {
        let (zk, yk) = (z.data()[k], y.data()[k]);
        let d1 = t.d1(zk, yk);
        let mut v = upstream.data()[k] * d1;
        if let (Some(d), Some(ut), Some(zdb)) = (dual, upstream_tangent, zdotbar.as_mut()) {
            let utk = ut.data()[k];
            v += utk * t.d2(zk, yk) * d.pre_tangent[last].data()[k];
            zdb.data_mut()[k] = utk * d1;
        }
        zbar.data_mut()[k] = v;
    }

    let mut l = last;
    loop {
        let b = &blocks[l];
        let h_prev = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let hdot_prev = dual.map(|d| {
            if l == 0 {
                &d.input_tangent
            } else {
                &d.post_tangent[l - 1]
            }
        });
        let w = b.weights(values);
        {
            let (gw, gb) = grad[b.weight_offset..b.bias_offset + b.rows].split_at_mut(b.rows * b.cols);
            // ∂W = z̄ᵀ h (+ ż̄ᵀ ḣ), ∂b = Σ_i z̄_i
            gemm_into(
                View::new(zbar.data(), zbar.rows(), b.rows).t(),
                View::new(h_prev.data(), h_prev.rows(), b.cols),
                0.0,
                gw,
            );
            if let (Some(zdb), Some(hd)) = (zdotbar.as_ref(), hdot_prev) {
                gemm_into(
                    View::new(zdb.data(), zdb.rows(), b.rows).t(),
                    View::new(hd.data(), hd.rows(), b.cols),
                    1.0,
                    gw,
                );
            }
            for i in 0..zbar.rows() {
                for (g, z) in gb.iter_mut().zip(zbar.row(i)) {
                    *g += z;
                }
            }
        }
        // h̄_{l-1} = z̄ W, ḣ̄_{l-1} = ż̄ W
        let hbar = back_linear(&zbar, w, b.cols);
        let hdotbar = zdotbar.as_ref().map(|zdb| back_linear(zdb, w, b.cols));
        if !hbar.is_finite() || hdotbar.as_ref().is_some_and(|m| !m.is_finite()) {
            return Err(Error::NonFiniteLayer { layer: l });
        }
        if l == 0 {
            return Ok((grad, hbar, hdotbar));
        }
        let zp = &cache.pre[l - 1];
        let hp = &cache.post[l - 1];
        let a = spec.activation;
        let mut next_zbar = Matrix::zeros(zp.rows(), zp.cols());
        let mut next_zdotbar = dual.map(|_| Matrix::zeros(zp.rows(), zp.cols()));
        for k in 0..zp.data().len() {
            let (zk, hk) = (zp.data()[k], hp.data()[k]);
            let d1 = a.d1(zk, hk);
            let mut v = hbar.data()[k] * d1;
            if let (Some(d), Some(hdb), Some(nzdb)) =
                (dual, hdotbar.as_ref(), next_zdotbar.as_mut())
            {
                let hdbk = hdb.data()[k];
                v += hdbk * a.d2(zk, hk) * d.pre_tangent[l - 1].data()[k];
                nzdb.data_mut()[k] = hdbk * d1;
            }
            next_zbar.data_mut()[k] = v;
        }
        zbar = next_zbar;
        zdotbar = next_zdotbar;
        l -= 1;
    }
}

fn back_linear(zbar: &Matrix, w: &[f64], fan_in: usize) -> Matrix {
    let mut hbar = Matrix::zeros(zbar.rows(), fan_in);
    gemm_into(
        View::new(zbar.data(), zbar.rows(), zbar.cols()),
        View::new(w, zbar.cols(), fan_in),
        0.0,
        hbar.data_mut(),
    );
    hbar
}

/// Single-sample forward pass.
pub fn mlp_forward(params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    forward_batch(params, &Matrix::row_vector(input)).map(Matrix::into_data)
}

/// Exact gradients of `⟨upstream, mlp(input)⟩` with respect to the
/// parameters and the input.
pub fn mlp_grad(
    params: &ParamVector,
    input: &[f64],
    upstream: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    let (_, cache) = forward_cached(params, &Matrix::row_vector(input))?;
    let (g, xbar) = backward(params, &cache, &Matrix::row_vector(upstream))?;
    Ok((params.with_values(g)?, xbar.into_data()))
}

#[cfg(test)]
mod tests {
    use super::super::matrix::dot;
    use super::*;
    use crate::numkit::{finite_diff_check, rng_from_seed};
    use proptest::prelude::*;
    use rand::Rng;

    fn linear_1_1(w: f64, b: f64) -> ParamVector {
        let spec = MlpSpec::new(vec![1, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
        ParamVector::new(spec, vec![w, b]).unwrap()
    }

    /// Independent forward pass written directly from the layer formula.
    fn naive_forward(p: &ParamVector, x: &[f64]) -> Vec<f64> {
        let layers = p.layers();
        let mut h = x.to_vec();
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = vec![0.0; w.rows()];
            for j in 0..w.rows() {
                z[j] = b[j];
                for k in 0..w.cols() {
                    z[j] += w.get(j, k) * h[k];
                }
            }
            h = if l + 1 == layers.len() {
                z.iter()
                    .map(|&v| match p.spec().output_transform {
                        OutputTransform::Identity => v,
                        OutputTransform::TanhSquash => v.tanh(),
                        OutputTransform::Exp => v.clamp(-10.0, 5.0).exp(),
                    })
                    .collect()
            } else {
                z.iter()
                    .map(|&v| match p.spec().activation {
                        Activation::Relu => if v > 0.0 { v } else { 0.0 },
                        Activation::Tanh => v.tanh(),
                    })
                    .collect()
            };
        }
        h
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh, OutputTransform::Identity).unwrap();
        let y = mlp_forward(&spec.zeros(), &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn affine_one_by_one() {
        let p = linear_1_1(2.0, 1.0);
        assert_eq!(mlp_forward(&p, &[3.0]).unwrap(), vec![7.0]);
        let (g, gx) = mlp_grad(&p, &[3.0], &[1.0]).unwrap();
        assert_eq!(gx, vec![2.0]);
        assert_eq!(g.values(), &[3.0, 1.0]);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let p = linear_1_1(1.0, 0.0);
        assert!(matches!(mlp_forward(&p, &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(mlp_grad(&p, &[1.0], &[1.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_reports_layer() {
        let spec = MlpSpec::new(vec![1, 2, 1], Activation::Relu, OutputTransform::Identity).unwrap();
        let p = ParamVector::new(spec, vec![1e300, 1e300, 0.0, 0.0, 1e300, 1e300, 0.0]).unwrap();
        match mlp_forward(&p, &[1e300]) {
            Err(Error::NonFiniteLayer { layer }) => assert_eq!(layer, 0),
            other => panic!("expected layer error, got {other:?}"),
        }
    }

    #[test]
    fn random_nets_match_naive_forward() {
        let mut rng = rng_from_seed(11);
        for transform in [OutputTransform::Identity, OutputTransform::TanhSquash, OutputTransform::Exp] {
            for act in [Activation::Relu, Activation::Tanh] {
                let spec = MlpSpec::new(vec![4, 8, 2], act, transform).unwrap();
                let p = spec.init(&mut rng);
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = mlp_forward(&p, &x).unwrap();
                let b = naive_forward(&p, &x);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn tanh_input_gradient_at_origin_is_weight_product() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
        let mut rng = rng_from_seed(3);
        let p = spec.init(&mut rng); // biases are zero
        let (_, gx) = mlp_grad(&p, &[0.0, 0.0], &[1.0]).unwrap();
        let layers = p.layers();
        let prod = layers[1].0.matmul(&layers[0].0).unwrap();
        for k in 0..2 {
            assert!((gx[k] - prod.get(0, k)).abs() < 1e-14);
        }
    }

    #[test]
    fn dual_pass_gradient_matches_finite_differences() {
        // loss(θ) = Σ_b ⟨v_b, ∇ₓ y_b⟩ computed via the tangent pass.
        let mut rng = rng_from_seed(5);
        for act in [Activation::Tanh, Activation::Relu] {
            for transform in [OutputTransform::Identity, OutputTransform::TanhSquash, OutputTransform::Exp] {
                let spec = MlpSpec::new(vec![3, 6, 5, 2], act, transform).unwrap();
                let p = init_with_biases(&spec, &mut rng);
                let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let v = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let ybar = Matrix::from_vec(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let ydotbar = Matrix::from_vec(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let objective = |vals: &[f64]| {
                    let q = p.with_values(vals.to_vec()).unwrap();
                    let (y, ydot, _) = forward_tangent(&q, &x, &v).unwrap();
                    dot(y.data(), ybar.data()) + dot(ydot.data(), ydotbar.data())
                };
                let (_, _, cache) = forward_tangent(&p, &x, &v).unwrap();
                let (g, _, _) = backward_dual(&p, &cache, &ybar, &ydotbar).unwrap();
                let report = finite_diff_check(objective, &g, p.values(), 1e-5, None);
                assert!(report.max_rel_error <= 1e-5, "{act:?} {transform:?}: {report:?}");
            }
        }
    }

    #[test]
    fn tangent_output_is_directional_derivative() {
        let mut rng = rng_from_seed(8);
        let spec = MlpSpec::new(vec![3, 7, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
        let p = spec.init(&mut rng);
        let x = vec![0.3, -0.2, 0.9];
        let v = vec![1.0, 0.5, -2.0];
        let (_, gx) = mlp_grad(&p, &x, &[1.0]).unwrap();
        let (_, ydot, _) =
            forward_tangent(&p, &Matrix::row_vector(&x), &Matrix::row_vector(&v)).unwrap();
        let expected: f64 = gx.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((ydot.data()[0] - expected).abs() < 1e-13);
    }

    /// Glorot weights plus nonzero biases, so no ReLU sits exactly on its kink.
    fn init_with_biases(spec: &MlpSpec, rng: &mut impl Rng) -> ParamVector {
        let mut p = spec.init(rng);
        for b in spec.blocks() {
            for v in &mut p.values_mut()[b.bias_offset..b.bias_offset + b.rows] {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        p
    }

    fn arb_spec() -> impl Strategy<Value = MlpSpec> {
        (
            prop::collection::vec(1usize..7, 2..5),
            prop_oneof![Just(Activation::Relu), Just(Activation::Tanh)],
            prop_oneof![
                Just(OutputTransform::Identity),
                Just(OutputTransform::TanhSquash),
                Just(OutputTransform::Exp)
            ],
        )
            .prop_map(|(w, a, o)| MlpSpec::new(w, a, o).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn flatten_round_trip(spec in arb_spec(), seed in any::<u64>()) {
            let p = spec.init(&mut rng_from_seed(seed));
            let q = ParamVector::from_layers(spec.clone(), &p.layers()).unwrap();
            prop_assert_eq!(&p, &q);
        }

        #[test]
        fn forward_is_bit_reproducible(spec in arb_spec(), seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let p = spec.init(&mut rng);
            let x: Vec<f64> = (0..spec.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = mlp_forward(&p, &x).unwrap();
            let b = mlp_forward(&p, &x).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }

        #[test]
        fn reverse_mode_matches_finite_differences(spec in arb_spec(), seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let p = init_with_biases(&spec, &mut rng);
            let x: Vec<f64> = (0..spec.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..spec.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (g, gx) = mlp_grad(&p, &x, &u).unwrap();
            let f = |vals: &[f64]| {
                let y = mlp_forward(&p.with_values(vals.to_vec()).unwrap(), &x).unwrap();
                dot(&y, &u)
            };
            let report = finite_diff_check(f, g.values(), p.values(), 1e-5, None);
            prop_assert!(report.max_rel_error <= 1e-5, "params: {:?}", report);
            let fx = |xs: &[f64]| dot(&mlp_forward(&p, xs).unwrap(), &u);
            let report = finite_diff_check(fx, &gx, &x, 1e-5, None);
            prop_assert!(report.max_rel_error <= 1e-5, "input: {:?}", report);
        }
    }
}
