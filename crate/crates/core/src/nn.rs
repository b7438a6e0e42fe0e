//! Dense feed-forward networks over a flat parameter vector.
//!
//! Hidden layers use the logistic sigmoid, the output layer is affine. Parameters
//! live in a single `ParamVector` laid out layer-major; within each layer the
//! weight matrix comes first (row-major, `out x in`) followed by the bias.
//! Every trainer in the crate works on this flat layout, so subset indices and
//! per-layer attribution are plain index ranges.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
}

impl NetworkSpec {
    /// Widths are `[input, hidden..., output]`; at least one hidden layer is required.
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        if layer_widths.len() < 3 {
            return Err(Error::Contract(format!(
                "network needs input, at least one hidden and an output layer, got widths {layer_widths:?}"
            )));
        }
        if layer_widths.contains(&0) {
            return Err(Error::Contract(format!(
                "layer widths must be positive, got {layer_widths:?}"
            )));
        }
        Ok(Self {
            layer_widths,
            activation: Activation::Sigmoid,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Index range of each layer (weights then bias) inside the flat vector.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let len = (w[0] + 1) * w[1];
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    /// Range of the bias entries of layer `layer`.
    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let r = &self.layer_ranges()[layer];
        let out = self.layer_widths[layer + 1];
        r.end - out..r.end
    }

    fn max_width(&self) -> usize {
        *self.layer_widths.iter().max().unwrap()
    }
}

/// Flat network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        check_dim("parameter vector", spec.param_count(), self.len())
    }

    /// Splits the flat vector into per-layer `(weights, bias)` pairs.
    pub fn unflatten(&self, spec: &NetworkSpec) -> Result<Vec<LayerParams>> {
        self.check(spec)?;
        Ok(spec
            .layer_ranges()
            .into_iter()
            .zip(spec.layer_widths.windows(2))
            .map(|(r, w)| {
                let n_w = w[0] * w[1];
                LayerParams {
                    inputs: w[0],
                    outputs: w[1],
                    weights: self.0[r.start..r.start + n_w].to_vec(),
                    bias: self.0[r.start + n_w..r.end].to_vec(),
                }
            })
            .collect())
    }

    pub fn flatten(layers: &[LayerParams]) -> Self {
        let mut v = Vec::with_capacity(
            layers
                .iter()
                .map(|l| l.weights.len() + l.bias.len())
                .sum(),
        );
        for l in layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        Self(v)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// One layer's parameters; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.layer_widths.windows(2) {
        let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
        for _ in 0..w[0] * w[1] {
            values.push(rng.random_range(-limit..=limit));
        }
        values.extend(std::iter::repeat_n(0.0, w[1]));
    }
    ParamVector(values)
}

/// Activations of every layer from one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

pub fn forward(spec: &NetworkSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let mut cache = forward_cached(spec, params, input)?;
    Ok(cache.activations.pop().unwrap())
}

pub fn forward_cached(
    spec: &NetworkSpec,
    params: &ParamVector,
    input: &[f64],
) -> Result<ForwardCache> {
    params.check(spec)?;
    check_dim("network input", spec.input_width(), input.len())?;
    let p = params.as_slice();
    let n_layers = spec.n_layers();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(input.to_vec());
    let mut offset = 0;
    for (l, w) in spec.layer_widths.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &p[offset..offset + n_in * n_out];
        let bias = &p[offset + n_in * n_out..offset + (n_in + 1) * n_out];
        offset += (n_in + 1) * n_out;
        let prev = &activations[l];
        let hidden = l + 1 < n_layers;
        let next: Vec<f64> = (0..n_out)
            .map(|j| {
                let row = &weights[j * n_in..(j + 1) * n_in];
                let z = row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() + bias[j];
                if hidden {
                    sigmoid(z)
                } else {
                    z
                }
            })
            .collect();
        activations.push(next);
    }
    Ok(ForwardCache { activations })
}

/// Reverse pass for one output cotangent.
///
/// Adds `scale * cotangentᵀ ∂y/∂π` into `grad_params` and, when given, writes
/// `scale * cotangentᵀ ∂y/∂x` into `grad_input`.
pub fn backward_into(
    spec: &NetworkSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    cotangent: &[f64],
    scale: f64,
    grad_params: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    debug_assert_eq!(cotangent.len(), spec.output_width());
    debug_assert_eq!(grad_params.len(), spec.param_count());
    let p = params.as_slice();
    let ranges = spec.layer_ranges();
    let widest = spec.max_width();
    let mut delta: Vec<f64> = cotangent.iter().map(|g| g * scale).collect();
    let mut upstream = vec![0.0; widest];
    for l in (0..spec.n_layers()).rev() {
        let n_in = spec.layer_widths[l];
        let n_out = spec.layer_widths[l + 1];
        let r = &ranges[l];
        let weights = &p[r.start..r.start + n_in * n_out];
        let a_prev = &cache.activations[l];
        let (gw, gb) = grad_params[r.clone()].split_at_mut(n_in * n_out);
        let up = &mut upstream[..n_in];
        up.iter_mut().for_each(|u| *u = 0.0);
        for j in 0..n_out {
            let d = delta[j];
            if d == 0.0 {
                continue;
            }
            gb[j] += d;
            let row_g = &mut gw[j * n_in..(j + 1) * n_in];
            let row_w = &weights[j * n_in..(j + 1) * n_in];
            for k in 0..n_in {
                row_g[k] += d * a_prev[k];
                up[k] += row_w[k] * d;
            }
        }
        if l > 0 {
            delta.clear();
            delta.extend(
                up.iter()
                    .zip(a_prev)
                    .map(|(u, a)| u * a * (1.0 - a)),
            );
        } else if let Some(gi) = grad_input.as_deref_mut() {
            gi.copy_from_slice(up);
        }
    }
}

/// Jacobian of the outputs with respect to the flat parameters (`n_out x n_π`).
pub fn jacobian_params(
    spec: &NetworkSpec,
    params: &ParamVector,
    input: &[f64],
) -> Result<DMatrix<f64>> {
    let (_, jp, _) = jacobians(spec, params, input)?;
    Ok(jp)
}

/// Output, parameter Jacobian and input Jacobian from one forward pass.
pub fn jacobians(
    spec: &NetworkSpec,
    params: &ParamVector,
    input: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let cache = forward_cached(spec, params, input)?;
    let n_out = spec.output_width();
    let n_p = spec.param_count();
    let n_in = spec.input_width();
    let mut jp = DMatrix::zeros(n_out, n_p);
    let mut jx = DMatrix::zeros(n_out, n_in);
    let mut row = vec![0.0; n_p];
    let mut row_x = vec![0.0; n_in];
    let mut e = vec![0.0; n_out];
    for i in 0..n_out {
        e[i] = 1.0;
        row.iter_mut().for_each(|v| *v = 0.0);
        backward_into(spec, params, &cache, &e, 1.0, &mut row, Some(&mut row_x));
        e[i] = 0.0;
        for (c, v) in row.iter().enumerate() {
            jp[(i, c)] = *v;
        }
        for (c, v) in row_x.iter().enumerate() {
            jx[(i, c)] = *v;
        }
    }
    Ok((cache.activations.last().unwrap().clone(), jp, jx))
}

/// On-disk form of a parameter vector together with its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub spec: NetworkSpec,
    pub values: ParamVector,
}

impl ParamFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ParamFile = serde_json::from_str(s)?;
        f.values.check(&f.spec)?;
        Ok(f)
    }
}
